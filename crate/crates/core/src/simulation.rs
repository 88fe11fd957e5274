//! Foam phantoms, the raw X-ray measurement model, flatfield pre-processing
//! and the two noise injectors used by the self-supervised losses.
//!
//! Raw data follow `Y = w · B P + G` with `P ~ Poisson(c · exp(-A x))`,
//! `G ~ N(u, v)` and `B` a 1D Gaussian blur along the detector axis.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::tomo::Projector;
use crate::{CoreError, Image, RawSinogram, Sinogram};

/// Default transmittance floor applied before the logarithm.
pub const DEFAULT_TRANSMITTANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsParams {
    /// Mean flatfield photon count per bin.
    pub photon_count: f64,
    /// Dark-signal mean per bin (counts).
    pub dark_mean: f64,
    /// Gaussian read-noise variance per bin (counts²).
    pub dark_variance: f64,
    /// Detector counts per photon.
    pub gain: f64,
    /// Std of the scintillator blur kernel, in detector pixels.
    pub blur_sigma: f64,
    pub blur: bool,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            photon_count: 500.0,
            dark_mean: 0.0,
            dark_variance: 50.0,
            gain: 1.0,
            blur_sigma: 0.8,
            blur: false,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.photon_count > 0.0) {
            return Err(CoreError::Parameter("photon count must be positive".into()));
        }
        if !(self.dark_variance >= 0.0) {
            return Err(CoreError::Parameter("dark variance must be non-negative".into()));
        }
        if !(self.gain > 0.0) {
            return Err(CoreError::Parameter("gain must be positive".into()));
        }
        if self.blur && !(self.blur_sigma >= 0.0) {
            return Err(CoreError::Parameter("blur sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// The blur kernel, or the identity kernel when blur is disabled.
    pub fn kernel(&self) -> Vec<f64> {
        if self.blur {
            gaussian_kernel(self.blur_sigma)
        } else {
            vec![1.0]
        }
    }
}

/// Sampled Gaussian truncated at `±⌈4σ⌉` and normalised to unit sum.
/// Odd length, centred. `sigma <= 0` gives the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection of an index into `0..n`.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Convolves every row with `kernel` using reflective boundaries.
pub fn blur_rows(data: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    if kernel.len() == 1 {
        return data.mapv(|v| v * kernel[0]);
    }
    let r = (kernel.len() / 2) as isize;
    let m = data.ncols();
    let mut out = Array2::zeros(data.dim());
    for (src, mut dst) in data.rows().into_iter().zip(out.rows_mut()) {
        for (i, o) in dst.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * src[reflect(i as isize + k as isize - r, m)])
                .sum();
        }
    }
    out
}

/// Per-pixel `Σ_j w_ij²` of [`blur_rows`] on rows of length `m`: the
/// variance gain for independent unit-variance input. Reflection folds
/// taps onto the same source near the edges, raising the sum there.
pub fn blur_energy(kernel: &[f64], m: usize) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut weights = vec![0.0; m];
    (0..m)
        .map(|i| {
            weights.iter_mut().for_each(|w| *w = 0.0);
            for (k, &kv) in kernel.iter().enumerate() {
                weights[reflect(i as isize + k as isize - r, m)] += kv;
            }
            weights.iter().map(|w| w * w).sum()
        })
        .collect()
}

/// Mean flatfield `p` and dark `q` per detector pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatDark {
    p: Array1<f64>,
    q: Array1<f64>,
}

impl FlatDark {
    pub fn new(p: Array1<f64>, q: Array1<f64>) -> Result<Self, CoreError> {
        if p.len() != q.len() {
            return Err(CoreError::Dimension("flat and dark lengths differ".into()));
        }
        if p.iter().zip(&q).any(|(a, b)| !(a > b)) {
            return Err(CoreError::Parameter("flat must exceed dark everywhere".into()));
        }
        Ok(Self { p, q })
    }

    pub fn uniform(n_det: usize, p: f64, q: f64) -> Result<Self, CoreError> {
        Self::new(Array1::from_elem(n_det, p), Array1::from_elem(n_det, q))
    }

    /// Averages flat and dark frame stacks over frames and rows.
    pub fn from_stacks(flats: &[Array2<f64>], darks: &[Array2<f64>]) -> Result<Self, CoreError> {
        let mean = |stack: &[Array2<f64>]| -> Result<Array1<f64>, CoreError> {
            let first = stack
                .first()
                .ok_or_else(|| CoreError::Calibration("empty frame stack".into()))?;
            let mut acc = Array1::zeros(first.ncols());
            let mut rows = 0usize;
            for f in stack {
                if f.ncols() != first.ncols() {
                    return Err(CoreError::Dimension("frames differ in width".into()));
                }
                for r in f.rows() {
                    acc += &r;
                    rows += 1;
                }
            }
            Ok(acc / rows as f64)
        };
        Self::new(mean(flats)?, mean(darks)?)
    }

    pub fn flat(&self) -> &Array1<f64> {
        &self.p
    }

    pub fn dark(&self) -> &Array1<f64> {
        &self.q
    }

    pub fn n_det(&self) -> usize {
        self.p.len()
    }

    fn check(&self, data: &Array2<f64>) -> Result<(), CoreError> {
        if data.ncols() != self.p.len() {
            return Err(CoreError::Dimension(format!(
                "data has {} detector pixels, flat/dark has {}",
                data.ncols(),
                self.p.len()
            )));
        }
        Ok(())
    }
}

/// Additive Gaussian noise correlated along the detector axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurredGaussianNoiseModel {
    /// Marginal standard deviation after blurring.
    pub sigma: f64,
    /// Normalised correlation kernel.
    pub kernel: Vec<f64>,
}

impl BlurredGaussianNoiseModel {
    pub fn new(sigma: f64, kernel: Vec<f64>) -> Result<Self, CoreError> {
        if !(sigma >= 0.0) {
            return Err(CoreError::Parameter("noise sigma must be non-negative".into()));
        }
        if kernel.is_empty() || kernel.len().is_multiple_of(2) {
            return Err(CoreError::Parameter("kernel must have odd length".into()));
        }
        let s: f64 = kernel.iter().sum();
        if (s - 1.0).abs() > 1e-9 || kernel.iter().any(|&v| v < 0.0) {
            return Err(CoreError::Parameter(
                "kernel must be non-negative and sum to one".into(),
            ));
        }
        Ok(Self { sigma, kernel })
    }
}

/// Poisson–Gaussian raw noise with uniform gain and read-noise std.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonGaussianParams {
    pub gamma: f64,
    pub sigma: f64,
}

impl PoissonGaussianParams {
    pub fn new(gamma: f64, sigma: f64) -> Result<Self, CoreError> {
        if !(gamma >= 0.0) || !(sigma >= 0.0) {
            return Err(CoreError::Parameter(format!(
                "need gamma >= 0 and sigma >= 0, got {gamma} and {sigma}"
            )));
        }
        Ok(Self { gamma, sigma })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoamSpec {
    pub rows: usize,
    pub cols: usize,
    /// Cylinder radius as a fraction of half the smaller image side.
    pub disk_radius_frac: f64,
    pub bubbles: usize,
    /// Bubble radius range in pixels.
    pub bubble_radius_min: f64,
    pub bubble_radius_max: f64,
    pub attenuation: f64,
    pub seed: u64,
}

impl Default for FoamSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            disk_radius_frac: 0.9,
            bubbles: 40,
            bubble_radius_min: 1.5,
            bubble_radius_max: 4.0,
            attenuation: 1.0,
            seed: 0,
        }
    }
}

/// Sub-pixel samples per axis when rasterising the foam.
const FOAM_SUPERSAMPLE: usize = 4;
/// Rejected placements allowed per requested bubble.
const FOAM_ATTEMPTS_PER_BUBBLE: usize = 2000;

/// A disk of constant attenuation with non-overlapping circular voids.
pub fn generate_foam(spec: &FoamSpec) -> Result<Image, CoreError> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(CoreError::Parameter("foam image must be non-empty".into()));
    }
    if !(spec.attenuation >= 0.0) {
        return Err(CoreError::Parameter("attenuation must be non-negative".into()));
    }
    if !(spec.disk_radius_frac > 0.0 && spec.disk_radius_frac <= 1.0) {
        return Err(CoreError::Parameter("disk radius fraction must be in (0, 1]".into()));
    }
    if !(spec.bubble_radius_min > 0.0 && spec.bubble_radius_min <= spec.bubble_radius_max) {
        return Err(CoreError::Parameter("invalid bubble radius range".into()));
    }
    let radius = spec.disk_radius_frac * spec.rows.min(spec.cols) as f64 / 2.0;
    if spec.bubbles > 0 && spec.bubble_radius_min >= radius {
        return Err(CoreError::Parameter("bubbles do not fit inside the disk".into()));
    }

    let bubbles = place_bubbles(spec, radius)?;
    let (cy, cx) = (spec.rows as f64 / 2.0, spec.cols as f64 / 2.0);
    let n = FOAM_SUPERSAMPLE;
    let mut img = Array2::zeros((spec.rows, spec.cols));
    for ((r, c), v) in img.indexed_iter_mut() {
        let mut hits = 0usize;
        for si in 0..n {
            for sj in 0..n {
                let y = r as f64 + (si as f64 + 0.5) / n as f64 - cy;
                let x = c as f64 + (sj as f64 + 0.5) / n as f64 - cx;
                if x * x + y * y > radius * radius {
                    continue;
                }
                if bubbles
                    .iter()
                    .any(|b| (x - b.x).powi(2) + (y - b.y).powi(2) <= b.r * b.r)
                {
                    continue;
                }
                hits += 1;
            }
        }
        *v = spec.attenuation * hits as f64 / (n * n) as f64;
    }
    Ok(img)
}

/// A circular void, centre relative to the image centre, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bubble {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// Rejection-samples the bubble layout for `spec`.
pub fn foam_bubbles(spec: &FoamSpec) -> Result<Vec<Bubble>, CoreError> {
    let radius = spec.disk_radius_frac * spec.rows.min(spec.cols) as f64 / 2.0;
    place_bubbles(spec, radius)
}

fn place_bubbles(spec: &FoamSpec, radius: f64) -> Result<Vec<Bubble>, CoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<Bubble> = Vec::with_capacity(spec.bubbles);
    let mut attempts = 0usize;
    let budget = FOAM_ATTEMPTS_PER_BUBBLE * spec.bubbles.max(1);
    while placed.len() < spec.bubbles {
        if attempts >= budget {
            return Err(CoreError::FoamPlacement {
                placed: placed.len(),
                requested: spec.bubbles,
            });
        }
        attempts += 1;
        let r = if spec.bubble_radius_max > spec.bubble_radius_min {
            rng.random_range(spec.bubble_radius_min..spec.bubble_radius_max)
        } else {
            spec.bubble_radius_min
        };
        let reach = radius - r;
        let (x, y) = (rng.random_range(-reach..reach), rng.random_range(-reach..reach));
        if x * x + y * y >= reach * reach {
            continue;
        }
        let ok = placed
            .iter()
            .all(|b| ((x - b.x).powi(2) + (y - b.y).powi(2)).sqrt() > r + b.r);
        if ok {
            placed.push(Bubble { x, y, r });
        }
    }
    Ok(placed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Noisy,
    /// Returns the expected measurement `w · B (c · exp(-A x)) + u`.
    NoiseFree,
}

/// Raw detector counts for an object.
pub fn simulate_raw(
    x: &Image,
    projector: &Projector,
    params: &PhysicsParams,
    mode: NoiseMode,
    rng: &mut impl Rng,
) -> Result<RawSinogram, CoreError> {
    if x.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CoreError::Parameter(
            "attenuation must be finite and non-negative".into(),
        ));
    }
    let line_integrals = projector.project(x)?;
    simulate_from_line_integrals(&line_integrals, params, mode, rng)
}

/// Raw detector counts for given line integrals (zero for flatfields).
pub fn simulate_from_line_integrals(
    line_integrals: &Sinogram,
    params: &PhysicsParams,
    mode: NoiseMode,
    rng: &mut impl Rng,
) -> Result<RawSinogram, CoreError> {
    params.validate()?;
    let photons = line_integrals.mapv(|l| params.photon_count * (-l).exp());
    let kernel = params.kernel();
    let counts = match mode {
        NoiseMode::NoiseFree => photons,
        NoiseMode::Noisy => photons.mapv(|lam| sample_poisson(lam, rng)),
    };
    let blurred = blur_rows(&counts, &kernel);
    let read = match mode {
        NoiseMode::Noisy if params.dark_variance > 0.0 => {
            Some(Normal::new(0.0, params.dark_variance.sqrt()).expect("finite std"))
        }
        _ => None,
    };
    Ok(blurred.mapv(|v| {
        let noise = read.as_ref().map_or(0.0, |n| n.sample(rng));
        params.gain * v + params.dark_mean + noise
    }))
}

/// Dark frame: source off, read noise only.
pub fn simulate_dark(
    shape: (usize, usize),
    params: &PhysicsParams,
    rng: &mut impl Rng,
) -> Result<RawSinogram, CoreError> {
    params.validate()?;
    let std = params.dark_variance.sqrt();
    Ok(Array2::from_shape_fn(shape, |_| {
        params.dark_mean + if std > 0.0 { std * standard_normal(rng) } else { 0.0 }
    }))
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else {
        Poisson::new(lambda).expect("positive finite rate").sample(rng)
    }
}

/// Flatfield and log transform: `-log((y - q) / (p - q))`, with the
/// transmittance clamped from below at `floor`.
pub fn preprocess_with_floor(
    y: &RawSinogram,
    fd: &FlatDark,
    floor: f64,
) -> Result<Sinogram, CoreError> {
    fd.check(y)?;
    let mut out = y.clone();
    for mut row in out.rows_mut() {
        for ((v, &p), &q) in row.iter_mut().zip(&fd.p).zip(&fd.q) {
            *v = -((*v - q) / (p - q)).max(floor).ln();
        }
    }
    Ok(out)
}

pub fn preprocess(y: &RawSinogram, fd: &FlatDark) -> Result<Sinogram, CoreError> {
    preprocess_with_floor(y, fd, DEFAULT_TRANSMITTANCE_FLOOR)
}

/// `(p - q) · exp(-s) + q`.
pub fn inverse_preprocess(s: &Sinogram, fd: &FlatDark) -> Result<RawSinogram, CoreError> {
    fd.check(s)?;
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        for ((v, &p), &q) in row.iter_mut().zip(&fd.p).zip(&fd.q) {
            *v = (p - q) * (-*v).exp() + q;
        }
    }
    Ok(out)
}

/// A fresh draw of blurred Gaussian noise with marginal std `model.sigma`.
///
/// White noise is generated on a row extended by the kernel radius on both
/// sides and filtered without padding, so every output pixel has exactly
/// the stationary statistics.
pub fn sample_bg_noise(
    model: &BlurredGaussianNoiseModel,
    shape: (usize, usize),
    rng: &mut impl Rng,
) -> Sinogram {
    let (n, m) = shape;
    if model.sigma == 0.0 {
        return Array2::zeros(shape);
    }
    let k = &model.kernel;
    let energy: f64 = k.iter().map(|v| v * v).sum();
    let white_std = model.sigma / energy.sqrt();
    let r = k.len() / 2;
    let mut out = Array2::zeros(shape);
    let mut row = vec![0.0; m + 2 * r];
    for i in 0..n {
        for v in row.iter_mut() {
            *v = white_std * standard_normal(rng);
        }
        for j in 0..m {
            out[[i, j]] = k.iter().zip(&row[j..j + k.len()]).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// A fresh Poisson–Gaussian realisation around `clean_raw`:
/// `γ · Poisson(clean / γ) + N(0, σ²)`.
pub fn sample_pg_noise(
    pg: &PoissonGaussianParams,
    clean_raw: &RawSinogram,
    rng: &mut impl Rng,
) -> Result<RawSinogram, CoreError> {
    if clean_raw.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CoreError::Parameter(
            "Poisson–Gaussian noise needs finite non-negative means".into(),
        ));
    }
    Ok(clean_raw.mapv(|z| {
        // γ → 0 concentrates γ · Poisson(z / γ) at z.
        let poisson = if pg.gamma > 0.0 {
            pg.gamma * sample_poisson(z / pg.gamma, rng)
        } else {
            z
        };
        let gauss = if pg.sigma > 0.0 {
            pg.sigma * standard_normal(rng)
        } else {
            0.0
        };
        poisson + gauss
    }))
}
