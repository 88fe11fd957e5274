//! Image quality metrics and their aggregation over a test set.

use serde::{Deserialize, Serialize};

use crate::{CoreError, Image};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 300.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(x: &Image, reference: &Image, data_range: f64) -> Result<(), CoreError> {
    if x.dim() != reference.dim() {
        return Err(CoreError::Dimension(format!(
            "image {:?} vs reference {:?}",
            x.dim(),
            reference.dim()
        )));
    }
    if x.is_empty() {
        return Err(CoreError::Metric("empty image".into()));
    }
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(CoreError::Metric(format!("data range must be positive, got {data_range}")));
    }
    Ok(())
}

/// `10 log10(R² / MSE)`, capped at [`PSNR_CAP_DB`] when the MSE vanishes.
pub fn psnr(x: &Image, reference: &Image, data_range: f64) -> Result<f64, CoreError> {
    check_pair(x, reference, data_range)?;
    let mse = x
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalised 1-D Gaussian window used by [`ssim`].
pub fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(data: &[f64], rows: usize, cols: usize, w: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = w.len();
    let oc = cols - k + 1;
    let or = rows - k + 1;
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..k).map(|i| w[i] * data[r * cols + c + i]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..k).map(|i| w[i] * tmp[(r + i) * oc + c]).sum();
        }
    }
    (out, or, oc)
}

/// Mean structural similarity over all fully contained 11×11 Gaussian
/// windows (σ = 1.5), with `C1 = (0.01 R)²` and `C2 = (0.03 R)²`.
pub fn ssim(x: &Image, reference: &Image, data_range: f64) -> Result<f64, CoreError> {
    check_pair(x, reference, data_range)?;
    let (rows, cols) = x.dim();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(CoreError::Metric(format!(
            "image {rows}x{cols} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let a: Vec<f64> = x.iter().copied().collect();
    let b: Vec<f64> = reference.iter().copied().collect();
    let w = ssim_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mu_a, or, oc) = filter_valid(&a, rows, cols, &w);
    let (mu_b, _, _) = filter_valid(&b, rows, cols, &w);
    let (aa, _, _) = filter_valid(&prod(&a, &a), rows, cols, &w);
    let (bb, _, _) = filter_valid(&prod(&b, &b), rows, cols, &w);
    let (ab, _, _) = filter_valid(&prod(&a, &b), rows, cols, &w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..or * oc {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (or * oc) as f64)
}

/// Mean and sample standard deviation of a metric over a test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and `n - 1` standard deviation; a single value has zero spread.
pub fn aggregate(values: &[f64]) -> Result<Aggregate, CoreError> {
    if values.is_empty() {
        return Err(CoreError::Metric("cannot aggregate an empty set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Aggregate {
        mean,
        std,
        count: values.len(),
    })
}

/// PSNR and SSIM of one reconstruction against its ground truth, using the
/// ground truth's dynamic range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn data_range(reference: &Image) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    hi - lo
}

pub fn score(x: &Image, reference: &Image) -> Result<ImageScores, CoreError> {
    let r = data_range(reference);
    Ok(ImageScores {
        psnr: psnr(x, reference, r)?,
        ssim: ssim(x, reference, r)?,
    })
}

/// Per-image PSNR and SSIM over a test set, with their aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_values: Vec<f64>,
    pub ssim_values: Vec<f64>,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
}

impl MetricReport {
    pub fn from_scores(scores: &[ImageScores]) -> Result<Self, CoreError> {
        let psnr_values: Vec<f64> = scores.iter().map(|s| s.psnr).collect();
        let ssim_values: Vec<f64> = scores.iter().map(|s| s.ssim).collect();
        Ok(Self {
            psnr: aggregate(&psnr_values)?,
            ssim: aggregate(&ssim_values)?,
            psnr_values,
            ssim_values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Image {
        Image::from_shape_fn((n, n), |(r, c)| (r * n + c) as f64 / (n * n) as f64)
    }

    #[test]
    fn identical_images() {
        let x = ramp(16);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&x, &x, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_known_value() {
        let x = Image::zeros((4, 4));
        let y = Image::from_elem((4, 4), 0.1);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = ramp(10);
        assert!(ssim(&x, &x, 1.0).is_err());
    }

    #[test]
    fn shape_mismatch_and_bad_range() {
        assert!(psnr(&ramp(12), &ramp(13), 1.0).is_err());
        assert!(psnr(&ramp(12), &ramp(12), 0.0).is_err());
    }

    #[test]
    fn aggregate_rules() {
        assert!(aggregate(&[]).is_err());
        let a = aggregate(&[2.0]).unwrap();
        assert_eq!((a.mean, a.std), (2.0, 0.0));
        let b = aggregate(&[1.0, 3.0]).unwrap();
        assert_eq!(b.mean, 2.0);
        assert!((b.std - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn window_is_normalised() {
        let w = ssim_window();
        assert_eq!(w.len(), SSIM_WINDOW);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
