use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msrn::checkpoint;
use msrn::config::TrainConfig;
use msrn::data::{load_dataset, synth_generate, SynthSpec};
use msrn::train::{eval_seed, evaluate, train};
use msrn::verify::{gradcheck_suite, kernel_check};

/// Multi-scale second-order similarity network: episodic few-shot training
/// on second-order pooled features, with built-in gradient and kernel
/// verification.
#[derive(Parser)]
#[command(name = "msrn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scale-texture dataset of PPM images.
    Synth {
        /// Number of classes (each gets its own texture frequency).
        #[arg(long)]
        classes: usize,
        /// Images per class.
        #[arg(long = "per-class")]
        per_class: usize,
        /// Base square resolution (>= 16, divisible by 4).
        #[arg(long)]
        res: usize,
        /// Generator seed; identical seeds write identical bytes.
        #[arg(long)]
        seed: u64,
        /// Output directory (one subdirectory per class).
        #[arg(long)]
        out: PathBuf,
        /// Render each image at a random member of the scale chain,
        /// upsampled back to the base resolution.
        #[arg(long = "scale-confounded")]
        scale_confounded: bool,
    },
    /// Train episodically from a config file; writes metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (root/<class>/<image>.ppm).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on freshly sampled episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episodes: usize,
    },
    /// Run the finite-difference gradient suite over every operation and the
    /// end-to-end composites.
    Gradcheck,
    /// Run the randomized polynomial-kernel linearization check.
    Kernelcheck,
}

const EXIT_VERIFICATION: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { classes, per_class, res, seed, out, scale_confounded } => {
            let spec =
                SynthSpec { classes, per_class, resolution: res, seed, scale_confounded };
            match synth_generate(&spec, &out) {
                Ok(()) => {
                    println!(
                        "wrote {} images ({classes} classes x {per_class}) to {}",
                        classes * per_class,
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_USAGE, e),
            }
        }
        Command::Train { config, data, out } => {
            let cfg = match TrainConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(EXIT_USAGE, e),
            };
            let ds = match load_dataset(&data) {
                Ok(d) => d,
                Err(e) => return fail(EXIT_USAGE, e),
            };
            match train(&cfg, &ds, &out) {
                Ok(report) => {
                    println!("metrics: {}", report.metrics_path.display());
                    println!("checkpoint: {}", report.checkpoint_path.display());
                    println!(
                        "eval over {} episodes: {}",
                        report.final_eval.episodes, report.final_eval
                    );
                    ExitCode::SUCCESS
                }
                Err(e @ msrn::train::TrainError::NonFinite { .. }) => fail(EXIT_VERIFICATION, e),
                Err(e) => fail(EXIT_USAGE, e),
            }
        }
        Command::Eval { checkpoint: ckpt_path, data, episodes } => {
            let loaded = match checkpoint::load(&ckpt_path) {
                Ok(l) => l,
                Err(e) => return fail(EXIT_USAGE, e),
            };
            let ds = match load_dataset(&data) {
                Ok(d) => d,
                Err(e) => return fail(EXIT_USAGE, e),
            };
            match evaluate(
                &loaded.model,
                &loaded.config,
                &ds,
                episodes,
                eval_seed(loaded.config.seed),
            ) {
                Ok(summary) => {
                    println!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_USAGE, e),
            }
        }
        Command::Gradcheck => match gradcheck_suite() {
            Ok(report) => {
                for entry in &report.entries {
                    println!(
                        "{:<38} max rel err {:>10.3e}  {}",
                        entry.name,
                        entry.max_rel_err,
                        if entry.pass { "PASS" } else { "FAIL" }
                    );
                }
                if report.all_pass() {
                    println!("gradient suite: all checks within {:.0e}", report.tolerance);
                    ExitCode::SUCCESS
                } else {
                    println!("gradient suite: FAILURES above {:.0e}", report.tolerance);
                    ExitCode::from(EXIT_VERIFICATION)
                }
            }
            Err(e) => fail(EXIT_VERIFICATION, e),
        },
        Command::Kernelcheck => {
            let report = kernel_check(100, 1);
            println!(
                "kernel linearization over {} trials: max |difference| = {:.3e} (tolerance {:.0e})",
                report.trials, report.max_abs_diff, report.tolerance
            );
            if report.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFICATION)
            }
        }
    }
}
