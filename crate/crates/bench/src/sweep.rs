//! Equivariance-weight sweeps: one training run per λ, selection by mean
//! validation PSNR.

use std::fmt::Write as _;

use ssct_core::metrics::MetricReport;

use crate::config::{ExperimentConfig, Split};
use crate::evaluate::evaluate_run;
use crate::train::{train, TrainSummary};
use crate::{config::run_name, fmt_f64, write_text, BenchError};

#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub lambda: f64,
    pub train: TrainSummary,
    pub validation: MetricReport,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Index of the selected λ.
    pub best: usize,
    /// Scores of the selected λ on the configured evaluation split.
    pub selected: MetricReport,
}

impl SweepResult {
    pub fn best_lambda(&self) -> f64 {
        self.entries[self.best].lambda
    }
}

/// Highest mean PSNR; the earliest entry wins ties.
pub fn select_best(psnr_means: &[f64]) -> Option<usize> {
    psnr_means
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &p)| match best {
            Some((_, b)) if b >= p => best,
            _ => Some((i, p)),
        })
        .map(|(i, _)| i)
}

pub fn summary_csv(result: &SweepResult) -> String {
    let mut s = String::from("lambda,psnr_mean,psnr_std,ssim_mean,ssim_std,best_epoch,selected\n");
    for (i, e) in result.entries.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            fmt_f64(e.lambda),
            fmt_f64(e.validation.psnr.mean),
            fmt_f64(e.validation.psnr.std),
            fmt_f64(e.validation.ssim.mean),
            fmt_f64(e.validation.ssim.std),
            e.train.best_epoch,
            (i == result.best) as u8
        );
    }
    s
}

/// Trains the configured method once per λ, scores every run on the
/// validation split, and evaluates the best one on the configured split
/// under the bare method name.
pub fn sweep(cfg: &ExperimentConfig, force: bool) -> Result<SweepResult, BenchError> {
    cfg.validate()?;
    let method = cfg.loss.method;
    if !method.uses_lambda() {
        return Err(BenchError::Config(format!("{method} has no equivariance weight to sweep")));
    }
    if cfg.sweep.lambdas.is_empty() {
        return Err(BenchError::Config("empty lambda list".into()));
    }
    let variant = cfg.run.variant;
    let mut entries = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        let spec = cfg.loss.clone().with_lambda(lambda);
        let (_, summary) = train(cfg, &spec, force)?;
        let (_, validation) = evaluate_run(cfg, variant, Some(&spec), Split::Val, &run_name(&spec))?;
        entries.push(SweepEntry {
            lambda,
            train: summary,
            validation,
        });
    }
    let means: Vec<f64> = entries.iter().map(|e| e.validation.psnr.mean).collect();
    let best = select_best(&means).expect("non-empty sweep");
    let spec = cfg.loss.clone().with_lambda(entries[best].lambda);
    let (_, selected) = evaluate_run(cfg, variant, Some(&spec), cfg.run.split, &method.to_string())?;
    let result = SweepResult {
        entries,
        best,
        selected,
    };
    write_text(&cfg.layout().sweep_summary(variant, method), &summary_csv(&result))?;
    Ok(result)
}
