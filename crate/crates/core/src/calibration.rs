//! Estimation of blur width, noise level and gain from stacks of frames
//! that share the same mean signal but carry independent noise.

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::simulation::{blur_energy, gaussian_kernel};
use crate::CoreError;

/// Largest lag used when fitting the blur width.
pub const MAX_LAG: usize = 8;
/// Tikhonov regulariser for deconvolution, relative to the squared DC gain.
pub const DECONV_EPS: f64 = 1e-3;
/// Lag-1 correlation below this many standard errors counts as white noise.
const LAG1_SIGNIFICANCE: f64 = 4.0;
/// Search range and resolution for the blur width.
const SIGMA_MAX: f64 = 3.0;
const SIGMA_STEP: f64 = 0.002;

#[derive(Clone, Debug)]
pub struct CalibrationInput {
    frames: Vec<Array2<f64>>,
}

impl CalibrationInput {
    pub fn new(frames: Vec<Array2<f64>>) -> Result<Self, CoreError> {
        if frames.len() < 2 {
            return Err(CoreError::Calibration(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        let dim = frames[0].dim();
        if frames.iter().any(|f| f.dim() != dim) {
            return Err(CoreError::Calibration("frames differ in shape".into()));
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(CoreError::Calibration("frames are empty".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Array2<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Per-pixel mean and unbiased variance across frames.
    pub fn moments(&self) -> (Array2<f64>, Array2<f64>) {
        let f = self.frames.len() as f64;
        let mut mean = Array2::zeros(self.frames[0].dim());
        for fr in &self.frames {
            mean += fr;
        }
        mean /= f;
        let mut var = Array2::zeros(mean.dim());
        for fr in &self.frames {
            var.zip_mut_with(&(fr - &mean), |v, d| *v += d * d);
        }
        var /= f - 1.0;
        (mean, var)
    }
}

/// Normalised autocorrelation of `frame - mean` along the detector axis at
/// lags `0..=max_lag`, pooled over frames and rows.
pub fn residual_autocorrelation(input: &CalibrationInput, max_lag: usize) -> Result<Vec<f64>, CoreError> {
    let (mean, _) = input.moments();
    let m = mean.ncols();
    let lags = max_lag.min(m.saturating_sub(1));
    let mut sums = vec![0.0; lags + 1];
    let mut counts = vec![0usize; lags + 1];
    for fr in input.frames() {
        let res = fr - &mean;
        for row in res.rows() {
            for d in 0..=lags {
                for j in 0..m - d {
                    sums[d] += row[j] * row[j + d];
                }
                counts[d] += m - d;
            }
        }
    }
    let c0 = sums[0] / counts[0] as f64;
    if !(c0 > 0.0) {
        return Err(CoreError::Calibration("no noise to analyze".into()));
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64 / c0)
        .collect())
}

/// Self-overlap `Σ k_i k_{i+d} / Σ k_i²` of the sampled Gaussian kernel.
pub fn kernel_self_overlap(kernel: &[f64], lag: usize) -> f64 {
    let energy: f64 = kernel.iter().map(|v| v * v).sum();
    if lag >= kernel.len() {
        return 0.0;
    }
    kernel.iter().zip(&kernel[lag..]).map(|(a, b)| a * b).sum::<f64>() / energy
}

/// Width of the Gaussian scintillator blur along the detector axis.
///
/// Fits `A · κ_σ(d)` to the residual autocorrelation at lags `1..=8`, where
/// `κ_σ` is the self-overlap of the sampled kernel and `A ∈ (0, 1]` absorbs
/// any unblurred (white) noise component. Returns 0 when the lag-1
/// correlation is not significant.
pub fn estimate_blur_sigma(input: &CalibrationInput) -> Result<f64, CoreError> {
    let rho = residual_autocorrelation(input, MAX_LAG)?;
    if rho.len() < 2 {
        return Err(CoreError::Calibration("frames too narrow to estimate blur".into()));
    }
    let (rows, m) = input.frames()[0].dim();
    let pairs = (input.len() * rows * (m - 1)) as f64;
    if rho[1] < LAG1_SIGNIFICANCE / pairs.sqrt() {
        return Ok(0.0);
    }

    let lags = &rho[1..];
    let cost = |sigma: f64| -> f64 {
        let k = gaussian_kernel(sigma);
        let model: Vec<f64> = (1..=lags.len()).map(|d| kernel_self_overlap(&k, d)).collect();
        let mm: f64 = model.iter().map(|v| v * v).sum();
        let rm: f64 = model.iter().zip(lags).map(|(a, b)| a * b).sum();
        let amp = if mm > 0.0 { (rm / mm).clamp(0.0, 1.0) } else { 0.0 };
        model.iter().zip(lags).map(|(mv, r)| (r - amp * mv).powi(2)).sum()
    };

    let steps = (SIGMA_MAX / SIGMA_STEP).round() as usize;
    let mut best = (f64::INFINITY, 0.0);
    for i in 1..=steps {
        let s = i as f64 * SIGMA_STEP;
        let c = cost(s);
        if c < best.0 {
            best = (c, s);
        }
    }
    // Golden-section refinement inside the winning grid cell.
    let (mut a, mut b) = ((best.1 - SIGMA_STEP).max(1e-6), best.1 + SIGMA_STEP);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..40 {
        let x1 = b - phi * (b - a);
        let x2 = a + phi * (b - a);
        if cost(x1) <= cost(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let refined = 0.5 * (a + b);
    Ok(if cost(refined) <= best.0 { refined } else { best.1 })
}

/// Deconvolves every row with `kernel` (circular, Tikhonov-regularised).
pub fn deconvolve_rows(data: &Array2<f64>, kernel: &[f64]) -> Result<Array2<f64>, CoreError> {
    let dc: f64 = kernel.iter().sum();
    if dc.abs() < 1e-12 {
        return Err(CoreError::Calibration("kernel has zero DC gain".into()));
    }
    let m = data.ncols();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    let ifft = planner.plan_fft_inverse(m);

    let r = kernel.len() / 2;
    let mut kf = vec![Complex::new(0.0, 0.0); m];
    for (i, &v) in kernel.iter().enumerate() {
        let idx = (i as isize - r as isize).rem_euclid(m as isize) as usize;
        kf[idx].re += v;
    }
    fft.process(&mut kf);
    let eps = DECONV_EPS * dc * dc;
    let inverse: Vec<Complex<f64>> = kf
        .iter()
        .map(|k| k.conj() / (k.norm_sqr() + eps) / m as f64)
        .collect();

    let mut out = Array2::zeros(data.dim());
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for (src, mut dst) in data.rows().into_iter().zip(out.rows_mut()) {
        for (b, &v) in buf.iter_mut().zip(src.iter()) {
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&inverse) {
            *b *= h;
        }
        ifft.process(&mut buf);
        for (d, b) in dst.iter_mut().zip(&buf) {
            *d = b.re;
        }
    }
    Ok(out)
}

/// Noise standard deviation before blurring: deconvolve each frame, take the
/// per-pixel std across frames, average over pixels. Pixels within the kernel
/// radius of the detector edges are skipped when the frame is wide enough,
/// since circular deconvolution is inexact there.
pub fn estimate_noise_std(input: &CalibrationInput, kernel: &[f64]) -> Result<f64, CoreError> {
    let deconvolved = input
        .frames()
        .iter()
        .map(|f| deconvolve_rows(f, kernel))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, var) = CalibrationInput::new(deconvolved)?.moments();
    let m = var.ncols();
    let r = kernel.len() / 2;
    let (lo, hi) = if m > 2 * r + 1 && r > 0 { (r, m - r) } else { (0, m) };
    let mut acc = 0.0;
    let mut n = 0usize;
    for row in var.rows() {
        for &v in row.iter().skip(lo).take(hi - lo) {
            acc += v.sqrt();
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Average over pixels of `variance / mean` across frames; equals the gain
/// `γ` for `Z = γ · Poisson(z / γ)`.
pub fn estimate_gain(input: &CalibrationInput) -> Result<f64, CoreError> {
    let (mean, var) = input.moments();
    if mean.iter().any(|&v| !(v > 0.0)) {
        return Err(CoreError::Calibration("per-pixel mean must be positive".into()));
    }
    if var.iter().all(|&v| v == 0.0) {
        return Err(CoreError::Calibration(
            "frames carry no noise; gain is undetermined".into(),
        ));
    }
    Ok(mean.iter().zip(var.iter()).map(|(m, v)| v / m).sum::<f64>() / mean.len() as f64)
}

/// Gain of blurred Poisson data with additive read noise:
/// `(var_flat - var_dark) / ((mean_flat - mean_dark) · Σ k²)`, averaged over
/// pixels, with `Σ k²` taken per detector pixel under the simulator's
/// reflective boundaries. Reduces to [`estimate_gain`] for a unit kernel and
/// noiseless darks.
pub fn estimate_gain_corrected(
    flats: &CalibrationInput,
    darks: &CalibrationInput,
    kernel: &[f64],
) -> Result<f64, CoreError> {
    let (fm, fv) = flats.moments();
    let (dm, dv) = darks.moments();
    let dark_mean = dm.mean().expect("non-empty");
    let dark_var = dv.mean().expect("non-empty");
    let energy = blur_energy(kernel, fm.ncols());
    let mut acc = 0.0;
    for ((r, c), m) in fm.indexed_iter() {
        let signal = m - dark_mean;
        if !(signal > 0.0) {
            return Err(CoreError::Calibration("flat does not exceed dark".into()));
        }
        acc += (fv[[r, c]] - dark_var) / (signal * energy[c]);
    }
    Ok(acc / fm.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn white(frames: usize, rows: usize, cols: usize, std: f64, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..frames)
            .map(|_| {
                Array2::from_shape_fn((rows, cols), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    5.0 + std * z
                })
            })
            .collect()
    }

    #[test]
    fn needs_two_frames() {
        assert!(CalibrationInput::new(white(1, 2, 8, 1.0, 0)).is_err());
        assert!(CalibrationInput::new(white(2, 2, 8, 1.0, 0)).is_ok());
    }

    #[test]
    fn constant_frames_are_rejected() {
        let frames = vec![Array2::from_elem((2, 16), 3.0); 4];
        let input = CalibrationInput::new(frames).unwrap();
        assert!(estimate_blur_sigma(&input).is_err());
        assert!(estimate_gain(&input).is_err());
    }

    #[test]
    fn white_noise_has_no_blur() {
        let input = CalibrationInput::new(white(64, 8, 96, 1.0, 1)).unwrap();
        assert!(estimate_blur_sigma(&input).unwrap() < 0.1);
    }

    #[test]
    fn self_overlap_of_identity_kernel() {
        assert_eq!(kernel_self_overlap(&[1.0], 0), 1.0);
        assert_eq!(kernel_self_overlap(&[1.0], 1), 0.0);
    }

    #[test]
    fn identity_kernel_noise_std() {
        let input = CalibrationInput::new(white(200, 4, 64, 1.0, 2)).unwrap();
        let s = estimate_noise_std(&input, &[1.0]).unwrap();
        assert!((s - 1.0).abs() < 0.02, "{s}");
    }

    #[test]
    fn two_frames_are_enough_to_run() {
        // Sample std from two frames is a very noisy estimator; the mean of
        // |x1 - x2| / sqrt(2) over pixels is still unbiased-ish (E ≈ 0.80σ).
        let input = CalibrationInput::new(white(2, 16, 64, 1.0, 3)).unwrap();
        let s = estimate_noise_std(&input, &[1.0]).unwrap();
        assert!((0.65..0.95).contains(&s), "{s}");
    }

    #[test]
    fn zero_dc_kernel_is_rejected() {
        let input = CalibrationInput::new(white(4, 2, 16, 1.0, 4)).unwrap();
        assert!(estimate_noise_std(&input, &[1.0, -1.0, 0.0]).is_err());
    }
}
