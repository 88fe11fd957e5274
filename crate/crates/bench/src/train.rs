//! Mini-batch training with validation-based early stopping.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssct_core::losses::{loss, loss_value, LossContext, LossSpec, Method, TrainingSample};
use ssct_core::simulation::{BlurredGaussianNoiseModel, PoissonGaussianParams};
use ssct_nnkit::{AdamState, CallCounter, Graph, Tensor, UNet};

use crate::calibrate::Calibration;
use crate::config::{run_name, ExperimentConfig, NetworkConfig, OptimizerConfig, Split, Variant};
use crate::dataset::{load_flat_dark, load_split};
use crate::{checkpoint, derive_seed, fmt_f64, prepare_output_dir, write_text, BenchError};

pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Whether the method's loss depends on calibrated noise models.
pub fn needs_calibration(method: Method) -> bool {
    matches!(method, Method::Nn2i | Method::Sure | Method::Rei | Method::E2i)
}

/// Operators and noise models for training on `variant`.
pub fn loss_context(cfg: &ExperimentConfig, variant: Variant, method: Method) -> Result<LossContext, BenchError> {
    let layout = cfg.layout();
    let geometry = cfg.dataset.geometry(variant)?;
    let fd = load_flat_dark(&layout, variant)?;
    let (bg, pg) = if needs_calibration(method) {
        let c = Calibration::load(&layout, variant.blur())?;
        (c.bg_model()?, c.pg_model()?)
    } else {
        // Unused by the method; any valid model will do.
        (
            BlurredGaussianNoiseModel::new(0.0, vec![1.0])?,
            PoissonGaussianParams::new(1.0, 0.0)?,
        )
    };
    Ok(LossContext::new(geometry, cfg.dataset.filter, fd, bg, pg)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss; absent for the untrained network.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Cumulative network calls made by training steps.
    pub train_nn_calls: u64,
    /// Cumulative network calls made by validation.
    pub val_nn_calls: u64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub method: Method,
    pub lambda: f64,
    pub epochs_run: usize,
    /// Epoch of the kept checkpoint; 0 is the initial network.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub batches_per_epoch: usize,
    pub nn_calls_per_loss: u64,
    pub train_nn_calls: u64,
    pub val_nn_calls: u64,
    pub stop_reason: String,
}

/// Everything [`fit`] needs besides the data.
pub struct FitSetup<'a> {
    pub ctx: &'a LossContext,
    pub spec: &'a LossSpec,
    pub network: &'a NetworkConfig,
    pub optimizer: &'a OptimizerConfig,
    pub seed: u64,
    pub run_dir: &'a Path,
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<(), BenchError> {
    let mut s = String::from("epoch,train_loss,val_loss,train_nn_calls,val_nn_calls,improved\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.train_loss.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.val_loss),
            r.train_nn_calls,
            r.val_nn_calls,
            r.improved as u8
        );
    }
    write_text(path, &s)
}

/// Mean validation loss under a fixed random stream, so epochs compare
/// like with like.
fn validation_loss(setup: &FitSetup<'_>, net: &UNet, val: &[TrainingSample]) -> Result<(f64, u64), BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, "validation", 0));
    let counter = CallCounter::new(net);
    let mut total = 0.0;
    for sample in val {
        total += loss_value(setup.spec, setup.ctx, &counter, sample, &mut rng)?;
    }
    Ok((total / val.len() as f64, counter.calls()))
}

/// One optimiser step on `batch`; returns the batch loss and call count.
fn step(
    setup: &FitSetup<'_>,
    net: &mut UNet,
    adam: &mut AdamState,
    batch: &[&TrainingSample],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, u64), BenchError> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g);
    let vars = bound.vars().to_vec();
    let counter = CallCounter::new(&bound);
    let mut total = None;
    for sample in batch {
        let l = loss(setup.spec, setup.ctx, &mut g, &counter, sample, rng)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
    let value = g.value(total).item();
    let calls = counter.calls();
    if !value.is_finite() {
        return Err(BenchError::Diverged {
            epoch: 0,
            reason: format!("training loss {value}"),
        });
    }
    let grads = g.backward(total)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
        .collect();
    adam.step(net.params_mut(), &grads).map_err(|e| BenchError::Diverged {
        epoch: 0,
        reason: e.to_string(),
    })?;
    Ok((value, calls))
}

/// Trains from a seeded initialisation, keeping the checkpoint with the
/// lowest validation loss. Stops after `patience` consecutive epochs
/// without improvement, or at `max_epochs`.
pub fn fit(setup: &FitSetup<'_>, train: &[TrainingSample], val: &[TrainingSample]) -> Result<TrainSummary, BenchError> {
    if train.is_empty() || val.is_empty() {
        return Err(BenchError::Config("training and validation sets must be non-empty".into()));
    }
    let opt = setup.optimizer;
    let ckpt = setup.run_dir.join(CHECKPOINT_DIR);
    let log = setup.run_dir.join(LOG_FILE);
    let mut net = UNet::new(setup.network.unet(), derive_seed(setup.seed, "init", 0))?;
    let mut adam = AdamState::new(opt.adam(), net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, "train", 0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches = train.len().div_ceil(opt.batch_size);

    let (val0, mut val_calls) = validation_loss(setup, &net, val)?;
    let mut summary = TrainSummary {
        method: setup.spec.method,
        lambda: setup.spec.lambda,
        epochs_run: 0,
        best_epoch: 0,
        best_val_loss: val0,
        batches_per_epoch: batches,
        nn_calls_per_loss: setup.spec.nn_calls(),
        train_nn_calls: 0,
        val_nn_calls: val_calls,
        stop_reason: "max_epochs".into(),
    };
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: val0,
        train_nn_calls: 0,
        val_nn_calls: val_calls,
        improved: true,
    }];
    let finish = |summary: &TrainSummary, records: &[EpochRecord]| -> Result<(), BenchError> {
        write_log(&log, records)?;
        write_text(
            &setup.run_dir.join(SUMMARY_FILE),
            &toml::to_string(summary).expect("summary serialises"),
        )
    };
    if !val0.is_finite() {
        summary.stop_reason = format!("diverged: validation loss {val0}");
        finish(&summary, &records)?;
        return Err(BenchError::Diverged {
            epoch: 0,
            reason: format!("validation loss {val0}"),
        });
    }
    checkpoint::save(&ckpt, &net, setup.network)?;
    write_log(&log, &records)?;

    let mut train_calls = 0u64;
    let mut stale = 0usize;
    for epoch in 1..=opt.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|&i| &train[i]).collect();
            match step(setup, &mut net, &mut adam, &batch, &mut rng) {
                Ok((l, calls)) => {
                    epoch_loss += l;
                    train_calls += calls;
                }
                Err(BenchError::Diverged { reason, .. }) => {
                    summary.epochs_run = epoch;
                    summary.train_nn_calls = train_calls;
                    summary.stop_reason = format!("diverged: {reason}");
                    finish(&summary, &records)?;
                    return Err(BenchError::Diverged { epoch, reason });
                }
                Err(e) => return Err(e),
            }
        }
        let (v, calls) = validation_loss(setup, &net, val)?;
        val_calls += calls;
        summary.epochs_run = epoch;
        summary.train_nn_calls = train_calls;
        summary.val_nn_calls = val_calls;
        if !v.is_finite() {
            summary.stop_reason = format!("diverged: validation loss {v}");
            finish(&summary, &records)?;
            return Err(BenchError::Diverged {
                epoch,
                reason: format!("validation loss {v}"),
            });
        }
        let improved = v < summary.best_val_loss;
        records.push(EpochRecord {
            epoch,
            train_loss: Some(epoch_loss / batches as f64),
            val_loss: v,
            train_nn_calls: train_calls,
            val_nn_calls: val_calls,
            improved,
        });
        if improved {
            summary.best_val_loss = v;
            summary.best_epoch = epoch;
            checkpoint::save(&ckpt, &net, setup.network)?;
            stale = 0;
        } else {
            stale += 1;
        }
        write_log(&log, &records)?;
        if stale > opt.patience {
            summary.stop_reason = "patience".into();
            break;
        }
    }
    finish(&summary, &records)?;
    Ok(summary)
}

/// Trains `spec` on the configured variant; returns the run directory
/// and its summary.
pub fn train(cfg: &ExperimentConfig, spec: &LossSpec, force: bool) -> Result<(PathBuf, TrainSummary), BenchError> {
    cfg.validate()?;
    spec.validate()?;
    let layout = cfg.layout();
    let variant = cfg.run.variant;
    let ctx = loss_context(cfg, variant, spec.method)?;
    let train = load_split(&layout, variant, Split::Train)?;
    let val = load_split(&layout, variant, Split::Val)?;
    let run_dir = layout.run_dir(variant, &run_name(spec));
    prepare_output_dir(&run_dir, force)?;
    let setup = FitSetup {
        ctx: &ctx,
        spec,
        network: &cfg.network,
        optimizer: &cfg.optimizer,
        seed: cfg.seed,
        run_dir: &run_dir,
    };
    let summary = fit(&setup, &train, &val)?;
    Ok((run_dir, summary))
}

pub fn read_summary(run_dir: &Path) -> Result<TrainSummary, BenchError> {
    let text = crate::read_text(&run_dir.join(SUMMARY_FILE), "training summary")?;
    toml::from_str(&text).map_err(|e| BenchError::Format(e.to_string()))
}
