use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ssct_bench::config::{run_name, ExperimentConfig};
use ssct_bench::{calibrate, dataset, evaluate, report, sweep, train};

/// Writes to stdout, ignoring a closed pipe so `ssct ... | head` exits
/// cleanly.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "ssct", about = "Self-supervised CT reconstruction benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate phantoms, sinograms and calibration stacks.
    Generate,
    /// Estimate blur, gain and noise levels from the calibration stacks.
    Calibrate,
    /// Train the configured loss with early stopping.
    Train,
    /// Train once per equivariance weight and keep the best.
    Sweep,
    /// Score a trained network, or plain FBP, on a split.
    Evaluate {
        /// Score FBP without a network.
        #[arg(long)]
        baseline: bool,
    },
    /// Tabulate every evaluation.
    Report,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SSCT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("SSCT_THREADS must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n > 0, "SSCT_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let path = cli.config.context("--config <file> is required")?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Generate => {
            dataset::generate(&cfg, cli.force)?;
            out!("dataset written to {}", cfg.layout().data_dir().display());
        }
        Command::Calibrate => {
            for (blur, c) in [false, true].into_iter().zip(calibrate::calibrate(&cfg)?) {
                out!(
                    "{}: blur sigma {:.4}, gain {:.4}, read variance {:.3}, noise std {:.5}, sinogram noise std {:.5}",
                    if blur { "blur" } else { "noblur" },
                    c.blur_sigma,
                    c.gain,
                    c.read_variance,
                    c.noise_std,
                    c.sinogram_noise_std
                );
            }
        }
        Command::Train => {
            let (dir, s) = train::train(&cfg, &cfg.loss, cli.force)?;
            out!(
                "{} on {}: best validation loss {:.6e} at epoch {} of {} ({}); {} training NN calls",
                run_name(&cfg.loss),
                cfg.run.variant,
                s.best_val_loss,
                s.best_epoch,
                s.epochs_run,
                s.stop_reason,
                s.train_nn_calls
            );
            out!("run written to {}", dir.display());
        }
        Command::Sweep => {
            let r = sweep::sweep(&cfg, cli.force)?;
            for e in &r.entries {
                out!(
                    "lambda {:>8}: validation PSNR {:.3} ± {:.3}",
                    e.lambda, e.validation.psnr.mean, e.validation.psnr.std
                );
            }
            out!(
                "selected lambda {} ({} PSNR {:.3})",
                r.best_lambda(),
                cfg.run.split,
                r.selected.psnr.mean
            );
        }
        Command::Evaluate { baseline } => {
            cfg.run.baseline |= baseline;
            let (path, m) = evaluate::evaluate(&cfg)?;
            out!(
                "PSNR {:.3} ± {:.3}, SSIM {:.4} ± {:.4} -> {}",
                m.psnr.mean,
                m.psnr.std,
                m.ssim.mean,
                m.ssim.std,
                path.display()
            );
        }
        Command::Report => {
            let t = report::report(&cfg)?;
            out!("{}", report::table_text(&t).trim_end());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
