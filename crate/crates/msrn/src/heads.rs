//! Self-supervised heads: a scale classifier over single pooled features and
//! a scale-discrepancy classifier over support-query pairs.
//!
//! Scale labels are 1-based from the finest resolution down. A pair at
//! scales (s, s*) carries the discrepancy s - s* + 1; its stored class index
//! adds an offset of S - 1 so the 2S - 1 possible gaps map onto 0..=2S-2.

use crate::relation::{pair_forward, PairNet, PairNetVars};
use crate::rng::Rng;
use crate::tape::{Result, Tape, TapeError, Var};
use crate::tensor::Tensor;

const SD_INPUT: usize = 64 * 64;
const SD_HIDDEN1: usize = 256;
const SD_HIDDEN2: usize = 64;

fn dense_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.uniform(-limit, limit))
}

/// Three dense layers over a vectorized pooled feature:
/// 4096 -> 256 -> 64 -> S logits.
#[derive(Clone)]
pub struct ScaleDiscriminatorParams {
    pub layers: Vec<(Tensor, Tensor)>, // (weight [out, in], bias [out])
}

impl ScaleDiscriminatorParams {
    pub fn init(scale_count: usize, rng: &mut Rng) -> Self {
        let dims = [SD_INPUT, SD_HIDDEN1, SD_HIDDEN2, scale_count];
        let layers = dims
            .windows(2)
            .map(|d| (dense_init(d[1], d[0], rng), Tensor::zeros(&[d[1]])))
            .collect();
        ScaleDiscriminatorParams { layers }
    }

    pub fn scale_count(&self) -> usize {
        self.layers[2].0.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ScaleDiscriminatorVars {
        ScaleDiscriminatorVars {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (tape.leaf(w.clone(), requires_grad), tape.leaf(b.clone(), requires_grad)))
                .collect(),
        }
    }
}

pub struct ScaleDiscriminatorVars {
    pub layers: Vec<(Var, Var)>,
}

/// Raw scale logits for one vectorized pooled feature of length 4096.
pub fn sd_predict(tape: &mut Tape, psi_vec: Var, p: &ScaleDiscriminatorVars) -> Result<Var> {
    let s = tape.value(psi_vec).shape();
    if s != [SD_INPUT] {
        return Err(TapeError::Shape {
            op: "sd_predict",
            detail: format!("expected [{SD_INPUT}], got {s:?}"),
        });
    }
    let mut x = psi_vec;
    for (i, (w, b)) in p.layers.iter().enumerate() {
        x = tape.matmul(*w, x)?;
        x = tape.add(x, *b)?;
        if i + 1 < p.layers.len() {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// -log softmax(logits)[class], assembled from tape primitives. Shifting the
/// logits by their forward-time maximum keeps the exponentials in range and
/// leaves both the value and the gradient unchanged.
pub fn cross_entropy(tape: &mut Tape, logits: Var, class: usize) -> Result<Var> {
    let n = tape.value(logits).len();
    if class >= n {
        return Err(TapeError::Contract(format!("class {class} out of {n} logits")));
    }
    let max = tape.value(logits).data().iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let shift = tape.constant(Tensor::full(&[n], max));
    let shifted = tape.sub(logits, shift)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum(e)?;
    let log_z = tape.ln(z)?;
    let one_hot = tape.constant(Tensor::from_fn(&[n], |i| if i == class { 1.0 } else { 0.0 }));
    let picked_vec = tape.mul(shifted, one_hot)?;
    let picked = tape.sum(picked_vec)?;
    tape.sub(log_z, picked)
}

/// Scale logits for a batch of vectorized features, one column each;
/// mathematically identical to calling [`sd_predict`] per feature but the
/// weight matrices are read once per batch. Returns [S, F].
pub fn sd_predict_batched(
    tape: &mut Tape,
    psi_vecs: &[Var],
    p: &ScaleDiscriminatorVars,
) -> Result<Var> {
    if psi_vecs.is_empty() {
        return Err(TapeError::Contract("sd batch must be nonempty".into()));
    }
    let mut cols = Vec::with_capacity(psi_vecs.len());
    for &v in psi_vecs {
        let s = tape.value(v).shape();
        if s != [SD_INPUT] {
            return Err(TapeError::Shape {
                op: "sd_predict",
                detail: format!("expected [{SD_INPUT}], got {s:?}"),
            });
        }
        cols.push(tape.reshape(v, &[SD_INPUT, 1])?);
    }
    let mut x = tape.concat(1, &cols)?;
    for (i, (w, b)) in p.layers.iter().enumerate() {
        x = tape.matmul(*w, x)?;
        x = crate::relation::add_col_broadcast(tape, x, *b)?;
        if i + 1 < p.layers.len() {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Summed cross-entropy over the columns of a [C, N] logit matrix against
/// per-column class indices.
pub fn cross_entropy_batched(tape: &mut Tape, logits: Var, classes: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != classes.len() {
        return Err(TapeError::Contract(format!(
            "cross_entropy_batched: logits {shape:?} vs {} classes",
            classes.len()
        )));
    }
    let (c_count, n) = (shape[0], shape[1]);
    if let Some(bad) = classes.iter().find(|&&c| c >= c_count) {
        return Err(TapeError::Contract(format!("class {bad} out of {c_count} logits")));
    }
    // per-column max shift, constant under differentiation and cancelling in
    // the loss value
    let data = tape.value(logits).data();
    let mut maxes = vec![f64::NEG_INFINITY; n];
    for row in 0..c_count {
        for (col, m) in maxes.iter_mut().enumerate() {
            *m = m.max(data[row * n + col]);
        }
    }
    let shift = tape.constant(Tensor::from_fn(&[c_count, n], |i| maxes[i % n]));
    let shifted = tape.sub(logits, shift)?;
    let e = tape.exp(shifted)?;
    let ones_row = tape.constant(Tensor::full(&[1, c_count], 1.0));
    let z = tape.matmul(ones_row, e)?; // [1, n]
    let log_z = tape.ln(z)?;
    let total_z = tape.sum(log_z)?;
    let one_hot = tape.constant(Tensor::from_fn(&[c_count, n], |i| {
        if i / n == classes[i % n] {
            1.0
        } else {
            0.0
        }
    }));
    let picked_mat = tape.mul(shifted, one_hot)?;
    let picked = tape.sum(picked_mat)?;
    tape.sub(total_z, picked)
}

/// Sum of cross-entropies over (logits, true 0-based scale index) pairs.
pub fn sd_loss(tape: &mut Tape, predictions: &[(Var, usize)]) -> Result<Var> {
    if predictions.is_empty() {
        return Err(TapeError::Contract("sd_loss over an empty prediction set".into()));
    }
    let mut total: Option<Var> = None;
    for &(logits, class) in predictions {
        let ce = cross_entropy(tape, logits, class)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(total.expect("nonempty"))
}

/// 0-based class index for the scale gap of a pair at 1-based scales
/// (s, s_star): s - s_star shifted up by S - 1.
pub fn discrepancy_class(s: usize, s_star: usize, scale_count: usize) -> Result<usize> {
    if s == 0 || s > scale_count || s_star == 0 || s_star > scale_count {
        return Err(TapeError::Contract(format!(
            "scale indices must lie in 1..={scale_count}, got ({s}, {s_star})"
        )));
    }
    Ok((s as isize - s_star as isize + scale_count as isize - 1) as usize)
}

/// Discrepancy head: the same pair body as the relation head, emitting
/// 2S - 1 logits instead of one squashed score.
#[derive(Clone)]
pub struct DiscrepancyDiscriminatorParams {
    pub net: PairNet,
}

impl DiscrepancyDiscriminatorParams {
    pub fn init(scale_count: usize, rng: &mut Rng) -> Self {
        DiscrepancyDiscriminatorParams { net: PairNet::init(2 * scale_count - 1, rng) }
    }

    pub fn class_count(&self) -> usize {
        self.net.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> PairNetVars {
        self.net.bind(tape, requires_grad)
    }
}

/// Raw discrepancy logits for a stacked support-query pair.
pub fn dd_predict(tape: &mut Tape, psi_i: Var, psi_j: Var, p: &PairNetVars) -> Result<Var> {
    pair_forward(tape, psi_i, psi_j, p)
}

/// Sum of cross-entropies over (logits, discrepancy class) pairs.
pub fn dd_loss(tape: &mut Tape, predictions: &[(Var, usize)]) -> Result<Var> {
    if predictions.is_empty() {
        return Err(TapeError::Contract("dd_loss over an empty prediction set".into()));
    }
    sd_loss(tape, predictions)
}
