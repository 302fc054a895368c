//! End-to-end trainer behaviour on a small synthetic dataset: smoke runs,
//! metric invariants, determinism and checkpoint round trips.

use std::fs;
use std::path::PathBuf;

use msrn::checkpoint;
use msrn::config::TrainConfig;
use msrn::data::{load_dataset, synth_generate, Dataset, SynthSpec};
use msrn::model::Model;
use msrn::rng::Rng;
use msrn::tensor::Tensor;
use msrn::train::{eval_seed, evaluate, train, LossBreakdown, MetricsRow, METRICS_HEADER};

fn tiny_dataset(tag: &str) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::Builder::new().prefix(&format!("msrn-{tag}-")).tempdir().unwrap();
    let spec = SynthSpec {
        classes: 6,
        per_class: 6,
        resolution: 16,
        seed: 42,
        scale_confounded: false,
    };
    synth_generate(&spec, dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    (dir, ds)
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        scales: vec![16],
        ways: 3,
        shots: 1,
        queries: 2,
        episodes: 10,
        eval_episodes: 4,
        seed,
        checkpoint_interval: 5,
        ..TrainConfig::default()
    }
}

fn read_rows(path: &PathBuf) -> Vec<MetricsRow> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER);
    lines
        .map(|line| {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(f.len(), 7);
            MetricsRow {
                episode: f[0] as usize,
                loss: LossBreakdown {
                    total: f[1],
                    relation: f[2],
                    sd: f[3],
                    dd: f[4],
                    omega: f[5],
                },
                accuracy: f[6],
            }
        })
        .collect()
}

#[test]
fn smoke_run_emits_one_metrics_row_per_episode() {
    let (_tmp, ds) = tiny_dataset("smoke");
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(3);
    let report = train(&cfg, &ds, out.path()).unwrap();
    let rows = read_rows(&report.metrics_path);
    assert_eq!(rows.len(), 10);
    assert!(report.checkpoint_path.exists());
    assert!(rows.iter().all(|r| r.loss.total.is_finite()));
    assert!((0.0..=1.0).contains(&report.final_eval.mean));
}

#[test]
fn metrics_rows_recompose_the_total_loss() {
    let (_tmp, ds) = tiny_dataset("recompose");
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(4);
    let report = train(&cfg, &ds, out.path()).unwrap();
    for row in read_rows(&report.metrics_path) {
        let recomposed = row.loss.recompose(&cfg);
        assert!(
            (row.loss.total - recomposed).abs() < 1e-10,
            "episode {}: total {} vs recomposed {}",
            row.episode,
            row.loss.total,
            recomposed
        );
    }
}

#[test]
fn identical_seeds_write_identical_metrics() {
    let (_tmp, ds) = tiny_dataset("determinism");
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let cfg = tiny_config(9);
    let a = train(&cfg, &ds, out_a.path()).unwrap();
    let b = train(&cfg, &ds, out_b.path()).unwrap();
    assert_eq!(
        fs::read(&a.metrics_path).unwrap(),
        fs::read(&b.metrics_path).unwrap(),
        "metrics files must be byte-identical"
    );
    assert_eq!(a.final_eval, b.final_eval);
}

#[test]
fn checkpoint_reload_reproduces_evaluation_bit_exactly() {
    let (_tmp, ds) = tiny_dataset("roundtrip");
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(5);
    let report = train(&cfg, &ds, out.path()).unwrap();

    let in_memory = evaluate(&report.model, &cfg, &ds, 6, eval_seed(cfg.seed)).unwrap();
    let loaded = checkpoint::load(&report.checkpoint_path).unwrap();
    let reloaded = evaluate(&loaded.model, &loaded.config, &ds, 6, eval_seed(cfg.seed)).unwrap();
    assert_eq!(in_memory.mean.to_bits(), reloaded.mean.to_bits());
    assert_eq!(in_memory.half_width.to_bits(), reloaded.half_width.to_bits());
}

#[test]
fn disabled_head_matches_zero_weight_trajectory() {
    let (_tmp, ds) = tiny_dataset("zeroweight");
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let disabled = TrainConfig { sd_enabled: false, dd_enabled: false, ..tiny_config(6) };
    let zeroed = TrainConfig { beta: 0.0, gamma: 0.0, ..tiny_config(6) };
    let a = train(&disabled, &ds, out_a.path()).unwrap();
    let b = train(&zeroed, &ds, out_b.path()).unwrap();
    let rows_a = read_rows(&a.metrics_path);
    let rows_b = read_rows(&b.metrics_path);
    for (ra, rb) in rows_a.iter().zip(&rows_b) {
        assert_eq!(
            ra.loss.total.to_bits(),
            rb.loss.total.to_bits(),
            "episode {}",
            ra.episode
        );
        assert_eq!(ra.accuracy.to_bits(), rb.accuracy.to_bits());
    }
    assert_eq!(a.final_eval, b.final_eval);
}

#[test]
fn untrained_zero_scored_head_hits_exact_chance_level() {
    // zeroing the final dense layer makes every relation score exactly 0.5;
    // ties resolve to the lowest class index, so accuracy is exactly 1/L
    let (_tmp, ds) = tiny_dataset("chance");
    let cfg = TrainConfig { ss_enabled: false, ..tiny_config(7) };
    let mut rng = Rng::new(cfg.seed);
    let mut model = Model::init(3, cfg.scale_count(), &mut rng);
    model.relation.net.fc2_w = Tensor::zeros(&[1, 64]);
    model.relation.net.fc2_b = Tensor::zeros(&[1]);
    let summary = evaluate(&model, &cfg, &ds, 8, 123).unwrap();
    assert_eq!(summary.mean, 1.0 / cfg.ways as f64);
    assert_eq!(summary.half_width, 0.0);
}

#[test]
fn single_scale_run_with_zero_weights_matches_relation_only_objective() {
    // with the selector off (its gating rewires the scores themselves, not
    // just the omega term), zero weights on the remaining heads reduce the
    // objective to the plain episode MSE and the trajectories match exactly
    let (_tmp, ds) = tiny_dataset("reduction");
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let zeroed = TrainConfig {
        ss_enabled: false,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..tiny_config(8)
    };
    let stripped = TrainConfig {
        ss_enabled: false,
        sd_enabled: false,
        dd_enabled: false,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..tiny_config(8)
    };
    let a = train(&zeroed, &ds, out_a.path()).unwrap();
    let b = train(&stripped, &ds, out_b.path()).unwrap();
    for (ra, rb) in read_rows(&a.metrics_path).iter().zip(&read_rows(&b.metrics_path)) {
        assert_eq!(ra.loss.total.to_bits(), rb.loss.total.to_bits());
        assert_eq!(ra.loss.relation.to_bits(), rb.loss.relation.to_bits());
    }
}

#[test]
fn crossref_training_runs_and_logs_finite_losses() {
    let (_tmp, ds) = tiny_dataset("crossref");
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        scales: vec![16, 8],
        crossref: true,
        episodes: 3,
        ..tiny_config(10)
    };
    // 8 px is below the encoder floor, so this must fail loudly
    assert!(train(&cfg, &ds, out.path()).is_err());

    let spec = SynthSpec {
        classes: 4,
        per_class: 5,
        resolution: 32,
        seed: 2,
        scale_confounded: false,
    };
    let dir = tempfile::tempdir().unwrap();
    synth_generate(&spec, dir.path()).unwrap();
    let ds32 = load_dataset(dir.path()).unwrap();
    let cfg = TrainConfig {
        scales: vec![32, 16],
        ways: 3,
        shots: 1,
        queries: 1,
        episodes: 3,
        eval_episodes: 2,
        crossref: true,
        seed: 11,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    };
    let report = train(&cfg, &ds32, out.path()).unwrap();
    assert_eq!(read_rows(&report.metrics_path).len(), 3);
}
