//! Gated attention over scales: a learned gate per pooled feature, the
//! gate-weighted relation score, and the class-aware regularizer on the
//! per-image scale-weight vectors.

use crate::relation::{relate, PairNetVars, FEATURE_SIDE};
use crate::tape::{Result, Tape, TapeError, Var};
use crate::tensor::Tensor;

/// The gate is two average-pooling stages (kernel 8) contracting a 64x64
/// feature to a scalar, then a learned affine and a sigmoid.
#[derive(Clone)]
pub struct SelectorParams {
    pub gain: Tensor, // [1]
    pub bias: Tensor, // [1]
}

impl SelectorParams {
    pub fn init() -> Self {
        SelectorParams { gain: Tensor::scalar(1.0), bias: Tensor::scalar(0.0) }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> SelectorVars {
        SelectorVars {
            gain: tape.leaf(self.gain.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
        }
    }
}

pub struct SelectorVars {
    pub gain: Var,
    pub bias: Var,
}

/// Gate for one pooled feature, strictly inside (0, 1).
pub fn select(tape: &mut Tape, psi: Var, p: &SelectorVars) -> Result<Var> {
    let s = tape.value(psi).shape();
    if s != [FEATURE_SIDE, FEATURE_SIDE] {
        return Err(TapeError::Shape {
            op: "select",
            detail: format!("expected [{FEATURE_SIDE}, {FEATURE_SIDE}], got {s:?}"),
        });
    }
    let pooled = tape.avgpool(psi, 8)?; // [8, 8]
    let pooled = tape.avgpool(pooled, 8)?; // [1, 1]
    let pooled = tape.reshape(pooled, &[1])?;
    let scaled = tape.mul(pooled, p.gain)?;
    let affine = tape.add(scaled, p.bias)?;
    tape.sigmoid(affine)
}

/// Materializes a [rows, cols] matrix filled with a scalar variable so the
/// gate can multiply a whole feature elementwise.
pub fn broadcast_scalar(tape: &mut Tape, scalar: Var, rows: usize, cols: usize) -> Result<Var> {
    let col = tape.constant(Tensor::full(&[rows, 1], 1.0));
    let as_mat = tape.reshape(scalar, &[1, 1])?;
    let col_scaled = tape.matmul(col, as_mat)?; // [rows, 1]
    let row = tape.constant(Tensor::full(&[1, cols], 1.0));
    tape.matmul(col_scaled, row)
}

/// Relation score where each feature is first multiplied by its own gate.
pub fn weighted_relate(
    tape: &mut Tape,
    psi_support: Var,
    psi_query: Var,
    sel: &SelectorVars,
    rel: &PairNetVars,
) -> Result<Var> {
    let gate_s = select(tape, psi_support, sel)?;
    let gate_q = select(tape, psi_query, sel)?;
    let gated_s = apply_gate(tape, psi_support, gate_s)?;
    let gated_q = apply_gate(tape, psi_query, gate_q)?;
    relate(tape, gated_s, gated_q, rel)
}

pub fn apply_gate(tape: &mut Tape, psi: Var, gate: Var) -> Result<Var> {
    let shape = tape.value(psi).shape().to_vec();
    let g = broadcast_scalar(tape, gate, shape[0], shape[1])?;
    tape.mul(psi, g)
}

/// Class-aware spread of scale-weight vectors over support x query pairs:
/// same-class pairs are pulled together, different-class pairs pushed apart.
///
/// Each entry is a weight vector (one gate per scale) with its class label.
pub fn omega(
    tape: &mut Tape,
    support: &[(Var, usize)],
    query: &[(Var, usize)],
) -> Result<Var> {
    if support.is_empty() || query.is_empty() {
        return Err(TapeError::Contract(
            "omega needs at least one support and one query weight vector".into(),
        ));
    }
    let mut total: Option<Var> = None;
    for &(wk, lk) in support {
        for &(wq, lq) in query {
            let diff = tape.sub(wk, wq)?;
            let sq = tape.square(diff)?;
            let dist = tape.sum(sq)?;
            let signed = tape.scalar_mul(dist, if lk == lq { 1.0 } else { -1.0 })?;
            total = Some(match total {
                Some(t) => tape.add(t, signed)?,
                None => signed,
            });
        }
    }
    Ok(total.expect("nonempty pair set"))
}
