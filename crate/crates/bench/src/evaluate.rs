//! Scoring reconstructions against ground truth.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ssct_core::losses::{LossSpec, TrainingSample};
use ssct_core::metrics::{aggregate, score, MetricReport};
use ssct_core::tomo::FbpOperator;
use ssct_core::Image;
use ssct_nnkit::{Tensor, UNet};

use crate::config::{run_name, ExperimentConfig, Split, Variant};
use crate::dataset::load_split;
use crate::train::CHECKPOINT_DIR;
use crate::{checkpoint, fmt_f64, read_text, write_text, BenchError};

/// Label of the plain FBP baseline in result files and tables.
pub const BASELINE_LABEL: &str = "FBP";

/// `g(R Ỹ)`, or `R Ỹ` without a network.
pub fn reconstruct(net: Option<&UNet>, fbp: &FbpOperator, sino: &ndarray::Array2<f64>) -> Result<Image, BenchError> {
    let x = fbp.fbp(sino)?;
    match net {
        None => Ok(x),
        Some(net) => Ok(net.infer(&Tensor::from_array2(&x))?.to_array2()?),
    }
}

pub fn score_samples(
    net: Option<&UNet>,
    fbp: &FbpOperator,
    samples: &[TrainingSample],
) -> Result<MetricReport, BenchError> {
    let scores = samples
        .iter()
        .map(|s| {
            let truth = s
                .truth
                .as_ref()
                .ok_or_else(|| BenchError::Config("evaluation needs ground truth".into()))?;
            Ok(score(&reconstruct(net, fbp, &s.sino)?, truth)?)
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    Ok(MetricReport::from_scores(&scores)?)
}

/// Per-image rows followed by `mean` and `std` rows.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut s = String::from("image,psnr,ssim\n");
    for (i, (p, q)) in report.psnr_values.iter().zip(&report.ssim_values).enumerate() {
        let _ = writeln!(s, "{i},{},{}", fmt_f64(*p), fmt_f64(*q));
    }
    let _ = writeln!(s, "mean,{},{}", fmt_f64(report.psnr.mean), fmt_f64(report.ssim.mean));
    let _ = writeln!(s, "std,{},{}", fmt_f64(report.psnr.std), fmt_f64(report.ssim.std));
    s
}

/// Parses [`metrics_csv`] output, recomputing the aggregates from the
/// per-image rows and checking them against the stored ones.
pub fn parse_metrics_csv(text: &str) -> Result<MetricReport, BenchError> {
    let bad = |m: String| BenchError::Format(m);
    let mut lines = text.lines();
    if lines.next() != Some("image,psnr,ssim") {
        return Err(bad("metrics file lacks its header".into()));
    }
    let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
    let mut stored: Vec<(f64, f64)> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(format!("malformed metrics row {line:?}")));
        }
        let p: f64 = f[1].parse().map_err(|_| bad(format!("bad value in {line:?}")))?;
        let q: f64 = f[2].parse().map_err(|_| bad(format!("bad value in {line:?}")))?;
        match f[0] {
            "mean" | "std" => stored.push((p, q)),
            _ => {
                psnr.push(p);
                ssim.push(q);
            }
        }
    }
    let report = MetricReport {
        psnr: aggregate(&psnr)?,
        ssim: aggregate(&ssim)?,
        psnr_values: psnr,
        ssim_values: ssim,
    };
    let expect = [
        (report.psnr.mean, report.ssim.mean),
        (report.psnr.std, report.ssim.std),
    ];
    if stored.len() != 2 || stored.iter().zip(&expect).any(|(a, b)| a != b) {
        return Err(bad("aggregate rows disagree with the per-image rows".into()));
    }
    Ok(report)
}

pub fn read_metrics(path: &Path) -> Result<MetricReport, BenchError> {
    parse_metrics_csv(&read_text(path, "metrics file")?)
}

/// Scores a split with the checkpoint of `spec` on `variant`, or with plain
/// FBP when `spec` is `None`, and writes the metrics under `label`.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    variant: Variant,
    spec: Option<&LossSpec>,
    split: Split,
    label: &str,
) -> Result<(PathBuf, MetricReport), BenchError> {
    let layout = cfg.layout();
    let net = match spec {
        None => None,
        Some(spec) => {
            let dir = layout.run_dir(variant, &run_name(spec)).join(CHECKPOINT_DIR);
            Some(checkpoint::load(&dir, &cfg.network)?)
        }
    };
    let fbp = FbpOperator::new(cfg.dataset.geometry(variant)?, cfg.dataset.filter);
    let samples = load_split(&layout, variant, split)?;
    let report = score_samples(net.as_ref(), &fbp, &samples)?;
    let path = layout.metrics(variant, label, split);
    write_text(&path, &metrics_csv(&report))?;
    Ok((path, report))
}

/// The `evaluate` command: the configured run, or the FBP baseline.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<(PathBuf, MetricReport), BenchError> {
    cfg.validate()?;
    let run = &cfg.run;
    if run.baseline {
        evaluate_run(cfg, run.variant, None, run.split, BASELINE_LABEL)
    } else {
        evaluate_run(cfg, run.variant, Some(&cfg.loss), run.split, &run_name(&cfg.loss))
    }
}
