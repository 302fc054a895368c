//! Similarity scoring of support-query pairs of pooled features, and the
//! episode objective built from those scores.
//!
//! One parameter set scores every scale pair; pooled features are always
//! 64x64 regardless of the source resolution, which is what makes that
//! sharing possible. The pair body (stack -> conv -> dense) is also reused
//! verbatim by the discrepancy head, which only swaps the output width.

use crate::rng::Rng;
use crate::tape::{Result, Tape, TapeError, Var};
use crate::tensor::Tensor;

pub const FEATURE_SIDE: usize = 64;
const CONV_CHANNELS: usize = 32;
const HIDDEN: usize = 64;
// conv (stride 2) halves 64 -> 32, maxpool halves again -> 16
const FLAT: usize = CONV_CHANNELS * 16 * 16;

fn dense_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.uniform(-limit, limit))
}

/// Shared scoring body over a stacked pair of 64x64 matrices:
/// conv3x3 (2 -> 32, stride 2) + relu + maxpool2x2, flatten,
/// dense -> 64 + relu, dense -> out_dim.
#[derive(Clone)]
pub struct PairNet {
    pub conv_w: Tensor, // [32, 2, 3, 3]
    pub conv_b: Tensor, // [32]
    pub fc1_w: Tensor,  // [64, 8192]
    pub fc1_b: Tensor,  // [64]
    pub fc2_w: Tensor,  // [out_dim, 64]
    pub fc2_b: Tensor,  // [out_dim]
}

impl PairNet {
    pub fn init(out_dim: usize, rng: &mut Rng) -> Self {
        let fan_in = 2 * 9;
        let fan_out = CONV_CHANNELS * 9;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        PairNet {
            conv_w: Tensor::from_fn(&[CONV_CHANNELS, 2, 3, 3], |_| rng.uniform(-limit, limit)),
            conv_b: Tensor::zeros(&[CONV_CHANNELS]),
            fc1_w: dense_init(HIDDEN, FLAT, rng),
            fc1_b: Tensor::zeros(&[HIDDEN]),
            fc2_w: dense_init(out_dim, HIDDEN, rng),
            fc2_b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fc2_w.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> PairNetVars {
        PairNetVars {
            conv_w: tape.leaf(self.conv_w.clone(), requires_grad),
            conv_b: tape.leaf(self.conv_b.clone(), requires_grad),
            fc1_w: tape.leaf(self.fc1_w.clone(), requires_grad),
            fc1_b: tape.leaf(self.fc1_b.clone(), requires_grad),
            fc2_w: tape.leaf(self.fc2_w.clone(), requires_grad),
            fc2_b: tape.leaf(self.fc2_b.clone(), requires_grad),
        }
    }
}

pub struct PairNetVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Stacks two 64x64 features along a new leading mode into [2, 64, 64].
pub fn stack_pair(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    for v in [a, b] {
        let s = tape.value(v).shape();
        if s != [FEATURE_SIDE, FEATURE_SIDE] {
            return Err(TapeError::Shape {
                op: "stack_pair",
                detail: format!("expected [{FEATURE_SIDE}, {FEATURE_SIDE}], got {s:?}"),
            });
        }
    }
    let a3 = tape.reshape(a, &[1, FEATURE_SIDE, FEATURE_SIDE])?;
    let b3 = tape.reshape(b, &[1, FEATURE_SIDE, FEATURE_SIDE])?;
    tape.concat(0, &[a3, b3])
}

/// Raw (pre-squash) output of the pair body; shape [out_dim].
pub fn pair_forward(tape: &mut Tape, a: Var, b: Var, p: &PairNetVars) -> Result<Var> {
    let x = stack_pair(tape, a, b)?;
    let x = tape.conv2d(x, p.conv_w, p.conv_b, 2, 1)?;
    let x = tape.relu(x)?;
    let x = tape.maxpool2x2(x)?;
    let x = tape.vectorize(x)?;
    let x = tape.matmul(p.fc1_w, x)?;
    let x = tape.add(x, p.fc1_b)?;
    let x = tape.relu(x)?;
    let x = tape.matmul(p.fc2_w, x)?;
    tape.add(x, p.fc2_b)
}

/// Relation head: pair body with a single output squashed into [0, 1].
#[derive(Clone)]
pub struct RelationParams {
    pub net: PairNet,
}

impl RelationParams {
    pub fn init(rng: &mut Rng) -> Self {
        RelationParams { net: PairNet::init(1, rng) }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> PairNetVars {
        self.net.bind(tape, requires_grad)
    }
}

/// Relation score in [0, 1] for a support/query pair of pooled features.
pub fn relate(tape: &mut Tape, support: Var, query: Var, p: &PairNetVars) -> Result<Var> {
    let raw = pair_forward(tape, support, query, p)?;
    tape.sigmoid(raw)
}

/// Adds a bias column to every column of a [rows, cols] matrix.
pub(crate) fn add_col_broadcast(tape: &mut Tape, m: Var, bias: Var) -> Result<Var> {
    let rows = tape.value(bias).len();
    let cols = tape.value(m).shape()[1];
    let b_col = tape.reshape(bias, &[rows, 1])?;
    let ones = tape.constant(Tensor::full(&[1, cols], 1.0));
    let b_mat = tape.matmul(b_col, ones)?;
    tape.add(m, b_mat)
}

/// Scores a whole batch of pairs in one pass: the convolution runs per pair,
/// but the dense layers see the flattened activations as columns of a single
/// matrix, so each weight matrix is read once per batch instead of once per
/// pair. Returns raw outputs of shape [out_dim, P].
pub fn pair_forward_batched(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
    p: &PairNetVars,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(TapeError::Contract("pair batch must be nonempty".into()));
    }
    let mut cols = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let x = stack_pair(tape, a, b)?;
        let x = tape.conv2d(x, p.conv_w, p.conv_b, 2, 1)?;
        let x = tape.relu(x)?;
        let x = tape.maxpool2x2(x)?;
        cols.push(tape.reshape(x, &[FLAT, 1])?);
    }
    let batch = tape.concat(1, &cols)?; // [FLAT, P]
    let h = tape.matmul(p.fc1_w, batch)?;
    let h = add_col_broadcast(tape, h, p.fc1_b)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(p.fc2_w, h)?;
    add_col_broadcast(tape, out, p.fc2_b)
}

/// Batched relation scores in [0, 1], shape [P].
pub fn relate_batched(tape: &mut Tape, pairs: &[(Var, Var)], p: &PairNetVars) -> Result<Var> {
    let raw = pair_forward_batched(tape, pairs, p)?;
    let squashed = tape.sigmoid(raw)?;
    tape.vectorize(squashed)
}

/// Elementwise mean of the pooled features of one class's shots.
pub fn aggregate_support(tape: &mut Tape, shots: &[Var]) -> Result<Var> {
    if shots.is_empty() {
        return Err(TapeError::Contract("aggregate_support over an empty set".into()));
    }
    let mut acc = shots[0];
    for &s in &shots[1..] {
        acc = tape.add(acc, s)?;
    }
    tape.scalar_mul(acc, 1.0 / shots.len() as f64)
}

/// Sum of squared residuals between a vector of relation scores and their
/// 0/1 class-match targets for one (support scale, query scale) pair.
pub fn episode_loss_pair(tape: &mut Tape, scores: Var, targets: &[f64]) -> Result<Var> {
    let n = tape.value(scores).len();
    if targets.is_empty() || n != targets.len() || tape.value(scores).rank() != 1 {
        return Err(TapeError::Contract(format!(
            "episode_loss_pair: {n} scores vs {} targets",
            targets.len()
        )));
    }
    let t = tape.constant(Tensor::new(vec![targets.len()], targets.to_vec()));
    let diff = tape.sub(scores, t)?;
    let sq = tape.square(diff)?;
    tape.sum(sq)
}

/// How per-scale-pair losses are combined into the episode relation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationLossMode {
    /// Mean of the diagonal losses: (1/S) sum_s L_ss.
    SameScale,
    /// Diagonal losses weighted 1/s per term instead of the uniform 1/S.
    SameScalePerTerm,
    /// Full grid with per-term weight 1/sqrt(s s'): sum_{s,s'} L_ss' / sqrt(s s').
    CrossRef,
}

/// Combines the per-pair losses. `losses` carries 1-based scale indices; the
/// diagonal must be present for the same-scale modes and the full grid for
/// cross-reference.
pub fn relation_loss(
    tape: &mut Tape,
    losses: &[(usize, usize, Var)],
    scale_count: usize,
    mode: RelationLossMode,
) -> Result<Var> {
    let find = |s: usize, s2: usize| -> Result<Var> {
        losses
            .iter()
            .find(|(a, b, _)| *a == s && *b == s2)
            .map(|(_, _, v)| *v)
            .ok_or_else(|| TapeError::Contract(format!("missing pair loss for scales ({s}, {s2})")))
    };
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, term: Var| -> Result<()> {
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        Ok(())
    };
    match mode {
        RelationLossMode::SameScale => {
            for s in 1..=scale_count {
                let l = find(s, s)?;
                push(tape, l)?;
            }
            let t = total.expect("scale_count >= 1");
            tape.scalar_mul(t, 1.0 / scale_count as f64)
        }
        RelationLossMode::SameScalePerTerm => {
            for s in 1..=scale_count {
                let l = find(s, s)?;
                let w = tape.scalar_mul(l, 1.0 / s as f64)?;
                push(tape, w)?;
            }
            Ok(total.expect("scale_count >= 1"))
        }
        RelationLossMode::CrossRef => {
            for s in 1..=scale_count {
                for s2 in 1..=scale_count {
                    let l = find(s, s2)?;
                    let w = tape.scalar_mul(l, 1.0 / ((s * s2) as f64).sqrt())?;
                    push(tape, w)?;
                }
            }
            Ok(total.expect("scale_count >= 1"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[64, 64], |_| rng.uniform(-0.9, 0.9))
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let mut rng = Rng::new(40);
        let params = RelationParams::init(&mut rng);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        for seed in 0..5 {
            let a = tape.leaf(feature(seed), false);
            let b = tape.leaf(feature(seed + 100), false);
            let s = relate(&mut tape, a, b, &vars).unwrap();
            let v = tape.value(s).item();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn zeroed_final_dense_layer_scores_exactly_half() {
        let mut rng = Rng::new(41);
        let mut params = RelationParams::init(&mut rng);
        params.net.fc2_w = Tensor::zeros(&[1, HIDDEN]);
        params.net.fc2_b = Tensor::zeros(&[1]);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let a = tape.leaf(feature(7), false);
        let b = tape.leaf(feature(8), false);
        let s = relate(&mut tape, a, b, &vars).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn stacked_pair_has_two_leading_channels() {
        let mut tape = Tape::new();
        let a = tape.leaf(feature(1), false);
        let b = tape.leaf(feature(2), false);
        let s = stack_pair(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 64, 64]);
        let wrong = tape.leaf(Tensor::zeros(&[32, 32]), false);
        assert!(matches!(stack_pair(&mut tape, a, wrong), Err(TapeError::Shape { .. })));
    }

    #[test]
    fn aggregation_is_the_elementwise_mean() {
        let mut tape = Tape::new();
        let a = tape.leaf(feature(3), false);
        let one = aggregate_support(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(one).data(), tape.value(a).data());

        let same = aggregate_support(&mut tape, &[a, a]).unwrap();
        assert!(tape.value(same).max_abs_diff(tape.value(a)) < 1e-15);

        let neg = tape.scalar_mul(a, -1.0).unwrap();
        let zero = aggregate_support(&mut tape, &[a, neg]).unwrap();
        assert!(tape.value(zero).max_abs() < 1e-15);

        assert!(aggregate_support(&mut tape, &[]).is_err());
    }

    #[test]
    fn uniform_half_scores_give_six_and_a_quarter() {
        // 5-way, one query per class: 5 on-diagonal (0.5 - 1)^2 plus 20
        // off-diagonal (0.5)^2 sums to 6.25
        let mut tape = Tape::new();
        let mut targets = Vec::new();
        for c in 0..5 {
            for q in 0..5 {
                targets.push(if c == q { 1.0 } else { 0.0 });
            }
        }
        let scores = tape.leaf(Tensor::full(&[25], 0.5), false);
        let loss = episode_loss_pair(&mut tape, scores, &targets).unwrap();
        assert!((tape.value(loss).item() - 6.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_scores_give_zero_loss() {
        let mut tape = Tape::new();
        let mut targets = Vec::new();
        for c in 0..3 {
            for q in 0..3 {
                targets.push(if c == q { 1.0 } else { 0.0 });
            }
        }
        let scores = tape.leaf(Tensor::new(vec![9], targets.clone()), false);
        let loss = episode_loss_pair(&mut tape, scores, &targets).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn single_pair_loss_reduces_to_squared_residual() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::scalar(0.3), false);
        let loss = episode_loss_pair(&mut tape, s, &[1.0]).unwrap();
        assert!((tape.value(loss).item() - 0.49).abs() < 1e-12);
    }

    #[test]
    fn batched_scores_match_individual_scoring() {
        let mut rng = Rng::new(43);
        let params = RelationParams::init(&mut rng);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let pairs: Vec<(Var, Var)> = (0..4)
            .map(|i| {
                let a = tape.leaf(feature(200 + i), false);
                let b = tape.leaf(feature(300 + i), false);
                (a, b)
            })
            .collect();
        let batched = relate_batched(&mut tape, &pairs, &vars).unwrap();
        assert_eq!(tape.value(batched).shape(), &[4]);
        for (i, &(a, b)) in pairs.iter().enumerate() {
            let single = relate(&mut tape, a, b, &vars).unwrap();
            let diff = (tape.value(batched).data()[i] - tape.value(single).item()).abs();
            assert!(diff < 1e-12, "pair {i}: diff {diff}");
        }
    }

    #[test]
    fn loss_modes_agree_on_a_single_scale() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::scalar(2.5), false);
        let pairs = [(1, 1, l)];
        for mode in [
            RelationLossMode::SameScale,
            RelationLossMode::SameScalePerTerm,
            RelationLossMode::CrossRef,
        ] {
            let total = relation_loss(&mut tape, &pairs, 1, mode).unwrap();
            assert!((tape.value(total).item() - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn same_scale_mode_averages_the_diagonal() {
        let mut tape = Tape::new();
        let pairs: Vec<(usize, usize, Var)> =
            (1..=3).map(|s| (s, s, tape.leaf(Tensor::scalar(3.0), false))).collect();
        let total = relation_loss(&mut tape, &pairs, 3, RelationLossMode::SameScale).unwrap();
        assert!((tape.value(total).item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn crossref_weighting_hand_value() {
        // all pair losses 1 with S = 2: 1/1 + 2/sqrt(2) + 1/2
        let mut tape = Tape::new();
        let mut pairs = Vec::new();
        for s in 1..=2 {
            for s2 in 1..=2 {
                pairs.push((s, s2, tape.leaf(Tensor::scalar(1.0), false)));
            }
        }
        let total = relation_loss(&mut tape, &pairs, 2, RelationLossMode::CrossRef).unwrap();
        assert!((tape.value(total).item() - 2.914213562373095).abs() < 1e-9);
    }

    #[test]
    fn missing_pair_is_a_contract_error() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::scalar(1.0), false);
        let pairs = [(1usize, 1usize, l)];
        assert!(matches!(
            relation_loss(&mut tape, &pairs, 2, RelationLossMode::SameScale),
            Err(TapeError::Contract(_))
        ));
        assert!(matches!(
            relation_loss(&mut tape, &pairs, 2, RelationLossMode::CrossRef),
            Err(TapeError::Contract(_))
        ));
    }

    #[test]
    fn argmax_prediction_survives_monotone_rescoring() {
        // applying the same strictly increasing map to all of a query's
        // scores cannot change the argmax class
        let mut rng = Rng::new(42);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();
            let argmax = |xs: &[f64]| {
                xs.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            };
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).tanh()).collect();
            assert_eq!(argmax(&scores), argmax(&mapped));
        }
    }
}
