//! Episodic training and evaluation.
//!
//! Each episode builds one tape: encode every support and query image at all
//! scales, pool, optionally gate by the scale selector, score the
//! class-prototype/query grid with the shared relation head, add the
//! self-supervised losses, and take one Adam step on the combined objective.
//! A CSV row of loss components and episode accuracy is written per episode,
//! and checkpoints are saved at a fixed interval and at the end.
//!
//! Evaluation replays the same forward path without gradients. Episodes draw
//! from generator streams split off the master seed before any work starts,
//! so accuracy is bit-reproducible no matter how many worker threads the
//! `MSRN_THREADS` variable allows (0 or unset runs sequentially).

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::adam::AdamState;
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::data::{sample_episode, DataError, Dataset, Episode};
use crate::encoder::encode_pyramid;
use crate::heads::{cross_entropy_batched, discrepancy_class, sd_predict_batched};
use crate::model::{Model, ModelVars};
use crate::pool::{pool_features, PnConfig};
use crate::relation::{
    aggregate_support, episode_loss_pair, pair_forward_batched, relate_batched, relation_loss,
    RelationLossMode,
};
use crate::rng::Rng;
use crate::selector::{apply_gate, omega, select};
use crate::tape::{Tape, TapeError, Var};

/// Salt for deriving the evaluation episode stream from a training seed.
const EVAL_SEED_SALT: u64 = 0x6576_616c;

pub fn eval_seed(train_seed: u64) -> u64 {
    train_seed ^ EVAL_SEED_SALT
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: TapeError,
    },
    #[error("non-finite loss at episode {episode} ({components}): {source}")]
    NonFinite {
        episode: usize,
        components: String,
        #[source]
        source: TapeError,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub relation: f64,
    pub sd: f64,
    pub dd: f64,
    pub omega: f64,
}

impl LossBreakdown {
    /// Recomposition of the weighted sum, in the same association order the
    /// tape uses.
    pub fn recompose(&self, cfg: &TrainConfig) -> f64 {
        ((cfg.alpha * self.omega + self.relation) + cfg.beta * self.sd) + cfg.gamma * self.dd
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub episode: usize,
    pub loss: LossBreakdown,
    pub accuracy: f64,
}

pub const METRICS_HEADER: &str = "episode,total,relation,sd,dd,omega,accuracy";

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.episode,
            self.loss.total,
            self.loss.relation,
            self.loss.sd,
            self.loss.dd,
            self.loss.omega,
            self.accuracy
        )
    }
}

/// Weighted objective: alpha * omega + relation + beta * sd + gamma * dd.
/// Disabled components are absent and contribute exactly zero.
pub fn total_loss(
    tape: &mut Tape,
    relation: Var,
    omega_term: Option<Var>,
    sd_term: Option<Var>,
    dd_term: Option<Var>,
    cfg: &TrainConfig,
) -> std::result::Result<Var, TapeError> {
    let mut total = match omega_term {
        Some(o) => {
            let w = tape.scalar_mul(o, cfg.alpha)?;
            tape.add(w, relation)?
        }
        None => relation,
    };
    if let Some(sd) = sd_term {
        let w = tape.scalar_mul(sd, cfg.beta)?;
        total = tape.add(total, w)?;
    }
    if let Some(dd) = dd_term {
        let w = tape.scalar_mul(dd, cfg.gamma)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Full objective graph.
    Train,
    /// Scores only; self-supervised heads and regularizers are skipped.
    Eval,
}

pub struct EpisodeGraph {
    pub total: Var,
    pub loss: LossBreakdown,
    pub accuracy: f64,
}

fn scale_pairs(s_count: usize, full_grid: bool) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in 1..=s_count {
        if full_grid {
            for s2 in 1..=s_count {
                pairs.push((s, s2));
            }
        } else {
            pairs.push((s, s));
        }
    }
    pairs
}

/// Builds the episode objective (or score grid, in eval mode) on the tape.
pub fn episode_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    episode: &Episode,
    cfg: &TrainConfig,
    mode: ForwardMode,
) -> std::result::Result<EpisodeGraph, TapeError> {
    let s_count = cfg.scale_count();
    let pn = PnConfig { sigma: cfg.sigma, beta_shift: cfg.beta_shift };
    let ways = cfg.ways;

    // pooled features per item and scale
    let pool_item = |tape: &mut Tape,
                     item: &crate::data::EpisodeItem|
     -> std::result::Result<Vec<Var>, TapeError> {
        let imgs: Vec<Var> =
            item.scales.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let fused = encode_pyramid(tape, &imgs, &vars.encoder)?;
        fused.into_iter().map(|f| pool_features(tape, f, &pn)).collect()
    };
    let psi_support: Vec<Vec<Var>> = episode
        .support
        .iter()
        .map(|item| pool_item(tape, item))
        .collect::<std::result::Result<_, _>>()?;
    let psi_query: Vec<Vec<Var>> = episode
        .query
        .iter()
        .map(|item| pool_item(tape, item))
        .collect::<std::result::Result<_, _>>()?;

    // selector gates per sample (for the regularizer) and per scored feature
    let sample_gates = |tape: &mut Tape,
                        psis: &[Vec<Var>]|
     -> std::result::Result<Vec<Vec<Var>>, TapeError> {
        psis.iter()
            .map(|per_scale| {
                per_scale.iter().map(|&p| select(tape, p, &vars.selector)).collect()
            })
            .collect()
    };
    let (gates_support, gates_query) = if cfg.ss_enabled {
        (Some(sample_gates(tape, &psi_support)?), Some(sample_gates(tape, &psi_query)?))
    } else {
        (None, None)
    };

    // class prototypes per scale from ungated features
    let mut protos: Vec<Vec<Var>> = Vec::with_capacity(ways);
    for c in 0..ways {
        let mut per_scale = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let shots: Vec<Var> = episode
                .support
                .iter()
                .zip(&psi_support)
                .filter(|(item, _)| item.label == c)
                .map(|(_, psi)| psi[s])
                .collect();
            per_scale.push(aggregate_support(tape, &shots)?);
        }
        protos.push(per_scale);
    }

    // features entering the relation head, gated by their own selector output
    let gate_feature = |tape: &mut Tape, psi: Var| -> std::result::Result<Var, TapeError> {
        let g = select(tape, psi, &vars.selector)?;
        apply_gate(tape, psi, g)
    };
    let mut scored_protos = protos.clone();
    let mut scored_query = psi_query.clone();
    if cfg.ss_enabled {
        for per_scale in &mut scored_protos {
            for slot in per_scale.iter_mut() {
                *slot = gate_feature(tape, *slot)?;
            }
        }
        for per_scale in &mut scored_query {
            for slot in per_scale.iter_mut() {
                *slot = gate_feature(tape, *slot)?;
            }
        }
    }

    // relation scores over the required scale-pair grid, one batch per cell
    let need_full_grid = match mode {
        ForwardMode::Train => cfg.crossref,
        ForwardMode::Eval => cfg.eval_full_grid,
    };
    let pairs = scale_pairs(s_count, need_full_grid);
    let n_query = episode.query.len();
    let mut pair_losses: Vec<(usize, usize, Var)> = Vec::new();
    // score values for the prediction rule, indexed [c][q]
    let mut agg_scores = vec![vec![0.0f64; n_query]; ways];
    for &(s, s2) in &pairs {
        let mut cell_pairs = Vec::with_capacity(ways * n_query);
        let mut targets = Vec::with_capacity(ways * n_query);
        for c in 0..ways {
            for (q, item) in episode.query.iter().enumerate() {
                cell_pairs.push((scored_protos[c][s - 1], scored_query[q][s2 - 1]));
                targets.push(if item.label == c { 1.0 } else { 0.0 });
            }
        }
        let scores = relate_batched(tape, &cell_pairs, &vars.relation)?;
        let use_for_prediction = cfg.eval_full_grid || s == s2;
        if use_for_prediction {
            for c in 0..ways {
                for q in 0..n_query {
                    agg_scores[c][q] += tape.value(scores).data()[c * n_query + q];
                }
            }
        }
        if mode == ForwardMode::Train {
            pair_losses.push((s, s2, episode_loss_pair(tape, scores, &targets)?));
        }
    }

    // argmax prediction, first index winning ties
    let mut correct = 0usize;
    for (q, item) in episode.query.iter().enumerate() {
        let mut best = 0usize;
        for c in 1..ways {
            if agg_scores[c][q] > agg_scores[best][q] {
                best = c;
            }
        }
        if best == item.label {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / n_query as f64;

    if mode == ForwardMode::Eval {
        let zero = tape.scalar_const(0.0);
        return Ok(EpisodeGraph { total: zero, loss: LossBreakdown::default(), accuracy });
    }

    let loss_mode = if cfg.crossref {
        RelationLossMode::CrossRef
    } else if cfg.same_scale_per_term {
        RelationLossMode::SameScalePerTerm
    } else {
        RelationLossMode::SameScale
    };
    let l_rel = relation_loss(tape, &pair_losses, s_count, loss_mode)?;

    // features feeding the self-supervised heads, optionally cut off from the
    // encoder
    let head_input = |tape: &mut Tape, psi: Var| -> Var {
        if cfg.detach_heads {
            let frozen = tape.value(psi).clone();
            tape.leaf(frozen, false)
        } else {
            psi
        }
    };

    let l_sd = if cfg.sd_enabled {
        let mut vecs = Vec::new();
        let mut labels = Vec::new();
        for psis in psi_support.iter().chain(&psi_query) {
            for (s, &psi) in psis.iter().enumerate() {
                let input = head_input(tape, psi);
                vecs.push(tape.vectorize(input)?);
                labels.push(s);
            }
        }
        let logits = sd_predict_batched(tape, &vecs, &vars.sd)?;
        Some(cross_entropy_batched(tape, logits, &labels)?)
    } else {
        None
    };

    let l_dd = if cfg.dd_enabled {
        let mut dd_pairs = Vec::new();
        let mut classes = Vec::new();
        for psis_k in &psi_support {
            for psis_q in &psi_query {
                for &(s, s2) in &pairs {
                    let a = head_input(tape, psis_k[s - 1]);
                    let b = head_input(tape, psis_q[s2 - 1]);
                    dd_pairs.push((a, b));
                    classes.push(discrepancy_class(s, s2, s_count)?);
                }
            }
        }
        let logits = pair_forward_batched(tape, &dd_pairs, &vars.dd)?;
        Some(cross_entropy_batched(tape, logits, &classes)?)
    } else {
        None
    };

    let l_omega = if cfg.ss_enabled {
        let weight_vectors = |tape: &mut Tape,
                              gates: &[Vec<Var>],
                              items: &[crate::data::EpisodeItem]|
         -> std::result::Result<Vec<(Var, usize)>, TapeError> {
            gates
                .iter()
                .zip(items)
                .map(|(g, item)| Ok((tape.concat(0, g)?, item.label)))
                .collect()
        };
        let ws = weight_vectors(tape, gates_support.as_ref().unwrap(), &episode.support)?;
        let wq = weight_vectors(tape, gates_query.as_ref().unwrap(), &episode.query)?;
        Some(omega(tape, &ws, &wq)?)
    } else {
        None
    };

    let total = total_loss(tape, l_rel, l_omega, l_sd, l_dd, cfg)?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
    let loss = LossBreakdown {
        total: tape.value(total).item(),
        relation: tape.value(l_rel).item(),
        sd: value(l_sd),
        dd: value(l_dd),
        omega: value(l_omega),
    };
    Ok(EpisodeGraph { total, loss, accuracy })
}

pub struct TrainReport {
    pub model: Model,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_eval: EvalSummary,
    pub rows: usize,
}

/// Runs the full episodic loop and returns the artifact paths plus a final
/// held-out-episode evaluation (reported, not used for model selection).
pub fn train(cfg: &TrainConfig, ds: &Dataset, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut master = Rng::new(cfg.seed);
    let mut init_rng = master.split();
    let mut episode_rng = master.split();
    let mut model = Model::init(3, cfg.scale_count(), &mut init_rng);
    let mut adam = AdamState::new(cfg.adam(), &model.shapes());

    let metrics_path = out_dir.join(format!("metrics_s{}.csv", cfg.seed));
    let checkpoint_path = out_dir.join("checkpoint.msrn");
    let mut metrics = fs::File::create(&metrics_path)?;
    writeln!(metrics, "{METRICS_HEADER}")?;

    for e in 0..cfg.episodes {
        let episode = sample_episode(ds, &mut episode_rng, cfg.ways, cfg.shots, cfg.queries, &cfg.scales)?;
        let mut tape = Tape::new();
        let (vars, ordered) = model.bind(&mut tape, true);
        let graph = episode_forward(&mut tape, &vars, &episode, cfg, ForwardMode::Train)
            .map_err(|source| wrap_tape_error(e, source, None))?;
        let mut grads = tape
            .backward(graph.total)
            .map_err(|source| wrap_tape_error(e, source, Some(graph.loss)))?;

        adam.begin_step();
        for (slot, ((_, param), var)) in
            model.entries_mut().into_iter().zip(&ordered).enumerate()
        {
            let grad = grads.take(*var).expect("bound parameter leaf");
            adam.update(slot, param, &grad).map_err(TrainError::Tape)?;
        }

        let row = MetricsRow { episode: e, loss: graph.loss, accuracy: graph.accuracy };
        writeln!(metrics, "{row}")?;

        if cfg.checkpoint_interval > 0 && (e + 1) % cfg.checkpoint_interval == 0 {
            checkpoint::save(&checkpoint_path, &model, &adam, cfg, e + 1)?;
        }
    }
    metrics.flush()?;
    checkpoint::save(&checkpoint_path, &model, &adam, cfg, cfg.episodes)?;

    let final_eval = evaluate(&model, cfg, ds, cfg.eval_episodes, eval_seed(cfg.seed))?;
    Ok(TrainReport { model, checkpoint_path, metrics_path, final_eval, rows: cfg.episodes })
}

fn wrap_tape_error(episode: usize, source: TapeError, loss: Option<LossBreakdown>) -> TrainError {
    if matches!(source, TapeError::NonFinite { .. }) {
        let components = match loss {
            Some(l) => format!(
                "relation={}, sd={}, dd={}, omega={}",
                l.relation, l.sd, l.dd, l.omega
            ),
            None => "components unavailable, failure during forward".into(),
        };
        TrainError::NonFinite { episode, components, source }
    } else {
        TrainError::Episode { episode, source }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    /// Mean episode accuracy as a fraction.
    pub mean: f64,
    /// 1.96 sigma / sqrt(episodes), also a fraction.
    pub half_width: f64,
    pub episodes: usize,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean * 100.0, self.half_width * 100.0)
    }
}

/// Mean and 1.96 sigma / sqrt(n) over per-episode accuracies.
pub fn summarize_accuracies(accs: &[f64]) -> EvalSummary {
    let n = accs.len();
    let mean = accs.iter().sum::<f64>() / n as f64;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    EvalSummary { mean, half_width: 1.96 * var.sqrt() / (n as f64).sqrt(), episodes: n }
}

fn worker_threads() -> usize {
    match std::env::var("MSRN_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(0),
        Err(_) => 0,
    }
}

/// Accuracy of one sampled episode under the evaluation prediction rule.
fn eval_episode(model: &Model, cfg: &TrainConfig, ds: &Dataset, rng: &mut Rng) -> Result<f64> {
    let episode = sample_episode(ds, rng, cfg.ways, cfg.shots, cfg.queries, &cfg.scales)?;
    let mut tape = Tape::new();
    let (vars, _) = model.bind(&mut tape, false);
    let graph = episode_forward(&mut tape, &vars, &episode, cfg, ForwardMode::Eval)
        .map_err(TrainError::Tape)?;
    Ok(graph.accuracy)
}

/// Top-1 accuracy of the scale head on pooled features of freshly drawn
/// images: every image contributes one feature per scale, labelled by its
/// scale index.
pub fn sd_scale_accuracy(
    model: &Model,
    cfg: &TrainConfig,
    ds: &Dataset,
    feature_count: usize,
    seed: u64,
) -> Result<f64> {
    let s_count = cfg.scale_count();
    let pn = crate::pool::PnConfig { sigma: cfg.sigma, beta_shift: cfg.beta_shift };
    let mut rng = Rng::new(seed);
    let mut seen = 0usize;
    let mut correct = 0usize;
    while seen < feature_count {
        let class = rng.below(ds.class_count());
        let image = &ds.classes[class].images[rng.below(ds.classes[class].images.len())];
        let variants: Vec<_> = cfg
            .scales
            .iter()
            .map(|&r| crate::data::rescale(image, r, r))
            .collect::<std::result::Result<_, _>>()?;

        let mut tape = Tape::new();
        let (vars, _) = model.bind(&mut tape, false);
        let imgs: Vec<Var> = variants.into_iter().map(|t| tape.leaf(t, false)).collect();
        let fused = encode_pyramid(&mut tape, &imgs, &vars.encoder).map_err(TrainError::Tape)?;
        let mut vecs = Vec::with_capacity(s_count);
        for f in fused {
            let pooled = pool_features(&mut tape, f, &pn).map_err(TrainError::Tape)?;
            vecs.push(tape.vectorize(pooled).map_err(TrainError::Tape)?);
        }
        let logits =
            sd_predict_batched(&mut tape, &vecs, &vars.sd).map_err(TrainError::Tape)?;
        for (col, _) in vecs.iter().enumerate().take(feature_count - seen) {
            let mut best = 0usize;
            for row in 1..s_count {
                if tape.value(logits).at2(row, col) > tape.value(logits).at2(best, col) {
                    best = row;
                }
            }
            if best == col {
                correct += 1;
            }
        }
        seen += s_count.min(feature_count - seen);
    }
    Ok(correct as f64 / feature_count as f64)
}

/// Evaluates over freshly sampled episodes. Per-episode generator streams
/// are split from the seed up front and results are reduced in episode
/// order, so the summary does not depend on the worker count.
pub fn evaluate(
    model: &Model,
    cfg: &TrainConfig,
    ds: &Dataset,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    assert!(episodes > 0, "evaluation needs at least one episode");
    let mut master = Rng::new(seed);
    let streams: Vec<Rng> = (0..episodes).map(|_| master.split()).collect();
    let threads = worker_threads().min(episodes);

    let accs: Vec<f64> = if threads <= 1 {
        let mut out = Vec::with_capacity(episodes);
        for mut rng in streams {
            out.push(eval_episode(model, cfg, ds, &mut rng)?);
        }
        out
    } else {
        let slots: Mutex<Vec<f64>> = Mutex::new(vec![0.0; episodes]);
        let next = AtomicUsize::new(0);
        let failure: Mutex<Option<TrainError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= episodes || failure.lock().unwrap().is_some() {
                        break;
                    }
                    let mut rng = streams[i].clone();
                    match eval_episode(model, cfg, ds, &mut rng) {
                        Ok(acc) => slots.lock().unwrap()[i] = acc,
                        Err(err) => {
                            failure.lock().unwrap().get_or_insert(err);
                            break;
                        }
                    }
                });
            }
        });
        if let Some(err) = failure.into_inner().unwrap() {
            return Err(err);
        }
        slots.into_inner().unwrap()
    };
    Ok(summarize_accuracies(&accs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn total_loss_reduces_to_relation_with_zero_weights() {
        let cfg = TrainConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..TrainConfig::default() };
        let mut tape = Tape::new();
        let rel = tape.leaf(Tensor::scalar(6.25), false);
        let om = tape.leaf(Tensor::scalar(2.0), false);
        let sd = tape.leaf(Tensor::scalar(1.1), false);
        let dd = tape.leaf(Tensor::scalar(1.6), false);
        let total = total_loss(&mut tape, rel, Some(om), Some(sd), Some(dd), &cfg).unwrap();
        assert_eq!(tape.value(total).item(), 6.25);
    }

    #[test]
    fn total_loss_hand_value() {
        // 6.25 + 0.001 * 2 + 0.1 * ln 3 + 0.1 * ln 5
        let cfg = TrainConfig { alpha: 1e-3, beta: 0.1, gamma: 0.1, ..TrainConfig::default() };
        let mut tape = Tape::new();
        let rel = tape.leaf(Tensor::scalar(6.25), false);
        let om = tape.leaf(Tensor::scalar(2.0), false);
        let sd = tape.leaf(Tensor::scalar(3.0f64.ln()), false);
        let dd = tape.leaf(Tensor::scalar(5.0f64.ln()), false);
        let total = total_loss(&mut tape, rel, Some(om), Some(sd), Some(dd), &cfg).unwrap();
        assert!((tape.value(total).item() - 6.5228).abs() < 1e-4);
    }

    #[test]
    fn total_loss_of_zero_components_is_zero() {
        let cfg = TrainConfig::default();
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::scalar(0.0), false);
        let total = total_loss(&mut tape, zero, Some(zero), Some(zero), Some(zero), &cfg).unwrap();
        assert_eq!(tape.value(total).item(), 0.0);
    }

    #[test]
    fn breakdown_recompose_matches_tape_association() {
        let cfg = TrainConfig::default();
        let loss =
            LossBreakdown { total: 0.0, relation: 1.25, sd: 0.7, dd: 0.3, omega: -0.4 };
        let mut tape = Tape::new();
        let rel = tape.leaf(Tensor::scalar(loss.relation), false);
        let om = tape.leaf(Tensor::scalar(loss.omega), false);
        let sd = tape.leaf(Tensor::scalar(loss.sd), false);
        let dd = tape.leaf(Tensor::scalar(loss.dd), false);
        let total = total_loss(&mut tape, rel, Some(om), Some(sd), Some(dd), &cfg).unwrap();
        assert_eq!(tape.value(total).item(), loss.recompose(&cfg));
    }

    #[test]
    fn summary_hand_values() {
        let two = summarize_accuracies(&[0.6, 0.8]);
        assert!((two.mean - 0.7).abs() < 1e-12);
        assert!((two.half_width - 1.96 * 0.1 / 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(format!("{two}"), "70.00 ± 13.86");

        let perfect = summarize_accuracies(&[1.0, 1.0, 1.0]);
        assert_eq!(format!("{perfect}"), "100.00 ± 0.00");
    }
}
