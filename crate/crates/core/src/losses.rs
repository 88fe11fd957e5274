//! Supervised and self-supervised training objectives.
//!
//! Every squared norm is a mean over the entries that enter it. Each call
//! draws one split subset, pixel phase or held-out projection; all
//! randomness comes from the caller's rng in a fixed order, so re-seeding
//! reproduces a loss exactly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use ssct_nnkit::{Denoiser, Graph, Tensor, Var};

use crate::rotation::{disk_mask, Rotation, RotationSampler};
use crate::simulation::{
    inverse_preprocess, preprocess, sample_bg_noise, sample_pg_noise, BlurredGaussianNoiseModel,
    FlatDark, PoissonGaussianParams, DEFAULT_TRANSMITTANCE_FLOOR,
};
use crate::tomo::{restrict, FbpOperator, FilterWindow, Geometry, ProjectionSubset, Projector, RampFilter};
use crate::{CoreError, Image, RawSinogram, Sinogram};

/// Number of interleaved projection subsets.
pub const PROJECTION_SPLITS: usize = 4;
/// Stride of the pixel-wise phase grid.
pub const PIXEL_STRIDE: usize = 4;
/// Default number of Monte Carlo divergence probes.
pub const DEFAULT_PROBES: usize = 3;
/// Default probe step relative to `mean |Z|`.
pub const DEFAULT_DELTA_REL: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Sup,
    N2i,
    S2i,
    P2p,
    Nn2i,
    Sure,
    Rei,
    E2i,
}

impl Method {
    /// Canonical ordering, used for reports and tie-breaking.
    pub const ALL: [Method; 8] = [
        Method::Sup,
        Method::N2i,
        Method::S2i,
        Method::P2p,
        Method::Nn2i,
        Method::Sure,
        Method::Rei,
        Method::E2i,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sup => "SUP",
            Method::N2i => "N2I",
            Method::S2i => "S2I",
            Method::P2p => "P2P",
            Method::Nn2i => "NN2I",
            Method::Sure => "SURE",
            Method::Rei => "REI",
            Method::E2i => "E2I",
        }
    }

    /// Network evaluations per loss call with `probes` divergence probes.
    pub fn nn_calls(self, probes: usize) -> u64 {
        match self {
            Method::Sure => 1 + probes as u64,
            Method::Rei => 2 + probes as u64,
            Method::E2i => 2,
            _ => 1,
        }
    }

    pub fn uses_lambda(self) -> bool {
        matches!(self, Method::Rei | Method::E2i)
    }

    pub fn needs_truth(self) -> bool {
        self == Method::Sup
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::Parameter(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub method: Method,
    /// Equivariance weight for REI and E2I.
    #[serde(default)]
    pub lambda: f64,
    /// Monte Carlo divergence probes for SURE and REI.
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Probe step relative to `mean |Z|`.
    #[serde(default = "default_delta_rel")]
    pub delta_rel: f64,
}

fn default_probes() -> usize {
    DEFAULT_PROBES
}

fn default_delta_rel() -> f64 {
    DEFAULT_DELTA_REL
}

impl LossSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: 0.0,
            probes: DEFAULT_PROBES,
            delta_rel: DEFAULT_DELTA_REL,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CoreError::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.probes == 0 {
            return Err(CoreError::Parameter("need at least one divergence probe".into()));
        }
        if !(self.delta_rel > 0.0) {
            return Err(CoreError::Parameter("probe step must be positive".into()));
        }
        Ok(())
    }

    pub fn nn_calls(&self) -> u64 {
        self.method.nn_calls(self.probes)
    }
}

/// One training example: raw counts, their pre-processed form and, when
/// available, the ground truth.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub raw: RawSinogram,
    pub sino: Sinogram,
    pub truth: Option<Image>,
}

/// The four interleaved projection subsets and the 16 pixel phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitScheme {
    ProjectionWise,
    PixelWise,
}

impl SplitScheme {
    pub fn draws(self) -> usize {
        match self {
            SplitScheme::ProjectionWise => PROJECTION_SPLITS,
            SplitScheme::PixelWise => PIXEL_STRIDE * PIXEL_STRIDE,
        }
    }

    pub fn draw(self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.draws())
    }
}

/// Indicator of pixel phase `phase` (row-major in the 4×4 grid).
pub fn phase_mask(shape: (usize, usize), phase: usize) -> Array2<f64> {
    let (pr, pc) = (phase / PIXEL_STRIDE, phase % PIXEL_STRIDE);
    Array2::from_shape_fn(shape, |(i, j)| {
        if i % PIXEL_STRIDE == pr && j % PIXEL_STRIDE == pc {
            1.0
        } else {
            0.0
        }
    })
}

/// Replaces phase pixels by the mean of their in-bounds axial neighbours.
pub fn local_mean_fill(sino: &Sinogram, phase: usize) -> Result<Sinogram, CoreError> {
    let (n, m) = sino.dim();
    if n < PIXEL_STRIDE || m < PIXEL_STRIDE {
        return Err(CoreError::Loss(format!(
            "sinogram {n}x{m} is smaller than the {PIXEL_STRIDE}x{PIXEL_STRIDE} phase grid"
        )));
    }
    let (pr, pc) = (phase / PIXEL_STRIDE, phase % PIXEL_STRIDE);
    let mut out = sino.clone();
    for i in (pr..n).step_by(PIXEL_STRIDE) {
        for j in (pc..m).step_by(PIXEL_STRIDE) {
            let mut acc = 0.0;
            let mut count = 0.0;
            let neighbours = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (a, b) in neighbours {
                if a < n && b < m {
                    acc += sino[[a, b]];
                    count += 1.0;
                }
            }
            out[[i, j]] = acc / count;
        }
    }
    Ok(out)
}

struct SubsetOps {
    target: ProjectionSubset,
    /// `A_s` on the held-out subset.
    target_projector: Arc<Projector>,
    /// `R_s` on the held-out subset.
    target_fbp: Arc<FbpOperator>,
    /// `R_{s^c}` on the remaining projections.
    input_fbp: Arc<FbpOperator>,
}

/// Geometry, operators and calibrated noise models shared by all losses.
pub struct LossContext {
    geometry: Geometry,
    projector: Arc<Projector>,
    fbp: Arc<FbpOperator>,
    filter: Arc<RampFilter>,
    flat_dark: FlatDark,
    bg: BlurredGaussianNoiseModel,
    pg: PoissonGaussianParams,
    subsets: Vec<SubsetOps>,
    mask: Tensor,
}

impl LossContext {
    pub fn new(
        geometry: Geometry,
        window: FilterWindow,
        flat_dark: FlatDark,
        bg: BlurredGaussianNoiseModel,
        pg: PoissonGaussianParams,
    ) -> Result<Self, CoreError> {
        if flat_dark.n_det() != geometry.n_det() {
            return Err(CoreError::Dimension(format!(
                "flat/dark has {} detector pixels, geometry has {}",
                flat_dark.n_det(),
                geometry.n_det()
            )));
        }
        let fbp = Arc::new(FbpOperator::new(geometry.clone(), window));
        let filter = fbp.filter_handle();
        let n = geometry.n_angles();
        let mut subsets = Vec::new();
        if n >= PROJECTION_SPLITS {
            for phase in 0..PROJECTION_SPLITS {
                let target = ProjectionSubset::interleaved(n, PROJECTION_SPLITS, phase);
                let target_geom = restrict(&geometry, &target)?;
                let input_geom = restrict(&geometry, &target.complement(n))?;
                subsets.push(SubsetOps {
                    target_projector: Arc::new(Projector::new(target_geom.clone())),
                    target_fbp: Arc::new(FbpOperator::with_filter(target_geom, Arc::clone(&filter))),
                    input_fbp: Arc::new(FbpOperator::with_filter(input_geom, Arc::clone(&filter))),
                    target,
                });
            }
        }
        let (rows, cols) = geometry.image_shape();
        let mask = Tensor::new(vec![rows, cols], disk_mask(rows, cols)).expect("shape");
        Ok(Self {
            projector: Arc::new(Projector::new(geometry.clone())),
            geometry,
            fbp,
            filter,
            flat_dark,
            bg,
            pg,
            subsets,
            mask,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn fbp(&self) -> &FbpOperator {
        &self.fbp
    }

    pub fn flat_dark(&self) -> &FlatDark {
        &self.flat_dark
    }

    pub fn bg_noise(&self) -> &BlurredGaussianNoiseModel {
        &self.bg
    }

    pub fn pg_noise(&self) -> &PoissonGaussianParams {
        &self.pg
    }

    /// `R_{s^c} Ỹ_{s^c}` for projection subset `phase`.
    pub fn subset_input(&self, sino: &Sinogram, phase: usize) -> Result<Image, CoreError> {
        let ops = self.subset(phase)?;
        ops.input_fbp
            .fbp(&ops.target.complement(self.geometry.n_angles()).select_rows(sino))
    }

    fn subset(&self, phase: usize) -> Result<&SubsetOps, CoreError> {
        if self.subsets.is_empty() {
            return Err(CoreError::Loss(format!(
                "projection splitting needs at least {PROJECTION_SPLITS} projections, got {}",
                self.geometry.n_angles()
            )));
        }
        self.subsets
            .get(phase)
            .ok_or_else(|| CoreError::Subset(format!("subset {phase} out of range")))
    }

    fn check_sample(&self, sample: &TrainingSample) -> Result<(), CoreError> {
        let shape = self.geometry.sino_shape();
        if sample.sino.dim() != shape || sample.raw.dim() != shape {
            return Err(CoreError::Dimension(format!(
                "sample sinograms {:?}/{:?} do not match geometry {:?}",
                sample.raw.dim(),
                sample.sino.dim(),
                shape
            )));
        }
        Ok(())
    }
}

fn constant(g: &mut Graph, a: &Array2<f64>) -> Var {
    g.constant(Tensor::from_array2(a))
}

fn linear(g: &mut Graph, x: Var, op: Arc<dyn ssct_nnkit::LinearOp>) -> Result<Var, CoreError> {
    Ok(g.linear(x, op)?)
}

/// Differentiable `-log((y - q) / (p - q))` with the default floor; the
/// derivative is zero where the floor is active.
pub fn preprocess_var(g: &mut Graph, raw: Var, fd: &FlatDark) -> Result<Var, CoreError> {
    let t = g.value(raw);
    let shape = t.shape().to_vec();
    let m = fd.n_det();
    if shape.len() != 2 || shape[1] != m {
        return Err(CoreError::Dimension(format!("raw sinogram {shape:?} vs {m} detectors")));
    }
    let mut out = Vec::with_capacity(t.len());
    let mut deriv = Vec::with_capacity(t.len());
    for (i, &y) in t.data().iter().enumerate() {
        let (p, q) = (fd.flat()[i % m], fd.dark()[i % m]);
        let ratio = (y - q) / (p - q);
        if ratio > DEFAULT_TRANSMITTANCE_FLOOR {
            out.push(-ratio.ln());
            deriv.push(-1.0 / (y - q));
        } else {
            out.push(-DEFAULT_TRANSMITTANCE_FLOOR.ln());
            deriv.push(0.0);
        }
    }
    let value = Tensor::new(shape.clone(), out).expect("shape");
    let deriv = Tensor::new(shape, deriv).expect("shape");
    Ok(g.custom(
        &[raw],
        value,
        Box::new(move |grad, _| vec![Some(grad.zip_map(&deriv, |a, b| a * b))]),
    ))
}

/// Differentiable `(p - q) · exp(-s) + q`.
pub fn inverse_preprocess_var(g: &mut Graph, sino: Var, fd: &FlatDark) -> Result<Var, CoreError> {
    let t = g.value(sino);
    let shape = t.shape().to_vec();
    let m = fd.n_det();
    if shape.len() != 2 || shape[1] != m {
        return Err(CoreError::Dimension(format!("sinogram {shape:?} vs {m} detectors")));
    }
    let mut out = Vec::with_capacity(t.len());
    let mut deriv = Vec::with_capacity(t.len());
    for (i, &s) in t.data().iter().enumerate() {
        let (p, q) = (fd.flat()[i % m], fd.dark()[i % m]);
        let e = (p - q) * (-s).exp();
        out.push(e + q);
        deriv.push(-e);
    }
    let value = Tensor::new(shape.clone(), out).expect("shape");
    let deriv = Tensor::new(shape, deriv).expect("shape");
    Ok(g.custom(
        &[sino],
        value,
        Box::new(move |grad, _| vec![Some(grad.zip_map(&deriv, |a, b| a * b))]),
    ))
}

/// `‖g(R Ỹ) − X‖²`.
pub fn supervised_loss<D: Denoiser + ?Sized>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
) -> Result<Var, CoreError> {
    ctx.check_sample(sample)?;
    let truth = sample
        .truth
        .as_ref()
        .ok_or_else(|| CoreError::Loss("supervised loss needs ground truth".into()))?;
    if truth.dim() != ctx.geometry.image_shape() {
        return Err(CoreError::Dimension("ground truth does not match geometry".into()));
    }
    let input = ctx.fbp.fbp(&sample.sino)?;
    let x = constant(g, &input);
    let out = net.denoise(g, x)?;
    let t = constant(g, truth);
    Ok(g.mse(out, t)?)
}

/// `‖g(R_{s^c}Ỹ_{s^c}) − R_sỸ_s‖²` for one random subset `s`.
pub fn n2i_loss<D: Denoiser + ?Sized, R: Rng>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    ctx.check_sample(sample)?;
    ctx.subset(0)?;
    let phase = SplitScheme::ProjectionWise.draw(rng);
    n2i_for_subset(ctx, g, net, sample, phase)
}

pub fn n2i_for_subset<D: Denoiser + ?Sized>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    phase: usize,
) -> Result<Var, CoreError> {
    let ops = ctx.subset(phase)?;
    let input = ctx.subset_input(&sample.sino, phase)?;
    let target = ops.target_fbp.fbp(&ops.target.select_rows(&sample.sino))?;
    let x = constant(g, &input);
    let out = net.denoise(g, x)?;
    let t = constant(g, &target);
    Ok(g.mse(out, t)?)
}

/// `‖A_s g(R_{s^c}Ỹ_{s^c}) − Ỹ_s‖²` for one random subset `s`.
pub fn s2i_loss<D: Denoiser + ?Sized, R: Rng>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    ctx.check_sample(sample)?;
    ctx.subset(0)?;
    let phase = SplitScheme::ProjectionWise.draw(rng);
    s2i_for_subset(ctx, g, net, sample, phase)
}

pub fn s2i_for_subset<D: Denoiser + ?Sized>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    phase: usize,
) -> Result<Var, CoreError> {
    let ops = ctx.subset(phase)?;
    let input = ctx.subset_input(&sample.sino, phase)?;
    let x = constant(g, &input);
    let out = net.denoise(g, x)?;
    let proj = linear(g, out, ops.target_projector.clone())?;
    let t = constant(g, &ops.target.select_rows(&sample.sino));
    Ok(g.mse(proj, t)?)
}

/// `‖M_s(A g(R H_sỸ) − Ỹ)‖²` over the phase pixels, one random phase.
pub fn p2p_loss<D: Denoiser + ?Sized, R: Rng>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    ctx.check_sample(sample)?;
    let phase = SplitScheme::PixelWise.draw(rng);
    p2p_for_phase(ctx, g, net, sample, phase)
}

pub fn p2p_for_phase<D: Denoiser + ?Sized>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    phase: usize,
) -> Result<Var, CoreError> {
    let filled = local_mean_fill(&sample.sino, phase)?;
    let mask = phase_mask(sample.sino.dim(), phase);
    let count = mask.sum();
    let input = ctx.fbp.fbp(&filled)?;
    let x = constant(g, &input);
    let out = net.denoise(g, x)?;
    let proj = linear(g, out, ctx.projector.clone())?;
    let t = constant(g, &sample.sino);
    let diff = g.sub(proj, t)?;
    let masked = g.mul_const(diff, &Tensor::from_array2(&mask))?;
    let ss = g.sum_squares(masked);
    Ok(g.scale(ss, 1.0 / count))
}

/// `‖A g(R(Ỹ + N)) − (Ỹ − N)‖²` with fresh blurred Gaussian noise `N`.
pub fn nn2i_loss<D: Denoiser + ?Sized, R: Rng>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    ctx.check_sample(sample)?;
    let noise = sample_bg_noise(&ctx.bg, sample.sino.dim(), rng);
    let input = ctx.fbp.fbp(&(&sample.sino + &noise))?;
    let x = constant(g, &input);
    let out = net.denoise(g, x)?;
    let proj = linear(g, out, ctx.projector.clone())?;
    let t = constant(g, &(&sample.sino - &noise));
    Ok(g.mse(proj, t)?)
}

/// Scalar parts of the Poisson–Gaussian SURE that do not depend on `b`.
fn noise_variance(z: &RawSinogram, pg: &PoissonGaussianParams) -> Array2<f64> {
    z.mapv(|v| pg.gamma * v + pg.sigma * pg.sigma)
}

/// `±1` probe vectors, drawn in row-major order.
pub fn draw_probes<R: Rng>(shape: (usize, usize), k: usize, rng: &mut R) -> Vec<Array2<f64>> {
    (0..k)
        .map(|_| Array2::from_shape_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
        .collect()
}

fn probe_step(z: &RawSinogram, delta_rel: f64) -> Result<f64, CoreError> {
    if !(delta_rel > 0.0) {
        return Err(CoreError::Parameter("probe step must be positive".into()));
    }
    let mean_abs = z.iter().map(|v| v.abs()).sum::<f64>() / z.len() as f64;
    let delta = delta_rel * mean_abs;
    if !(delta > 0.0) {
        return Err(CoreError::Parameter("probe step is zero for an all-zero input".into()));
    }
    Ok(delta)
}

/// Poisson–Gaussian SURE of a plain function `b`:
/// `mean((b(Z) − Z)²) − mean(v) + 2 mean(v ⊙ d̂)` with `v = γZ + σ²` and
/// `d̂ = (1/K) Σ ε ⊙ (b(Z + δε) − b(Z)) / δ`.
pub fn sure_pg<F, R>(
    b: F,
    z: &RawSinogram,
    pg: &PoissonGaussianParams,
    probes: usize,
    delta: f64,
    rng: &mut R,
) -> Result<f64, CoreError>
where
    F: Fn(&RawSinogram) -> RawSinogram,
    R: Rng,
{
    if probes == 0 {
        return Err(CoreError::Parameter("need at least one divergence probe".into()));
    }
    if !(delta > 0.0) {
        return Err(CoreError::Parameter("probe step must be positive".into()));
    }
    let eps = draw_probes(z.dim(), probes, rng);
    let b0 = b(z);
    if b0.dim() != z.dim() {
        return Err(CoreError::Dimension("b must preserve the shape of Z".into()));
    }
    let var = noise_variance(z, pg);
    let n = z.len() as f64;
    let mut div = Array2::<f64>::zeros(z.dim());
    for e in &eps {
        let bp = b(&(z + &(e * delta)));
        div += &(e * &(&bp - &b0));
    }
    div /= delta * probes as f64;
    let fidelity = (&b0 - z).mapv(|v| v * v).sum() / n;
    let level = var.sum() / n;
    let divergence = (&var * &div).sum() / n;
    Ok(fidelity - level + 2.0 * divergence)
}

/// Graph form of [`sure_pg`] given the outputs `b(Z)` and `b(Z + δε_k)`.
pub fn sure_pg_graph(
    g: &mut Graph,
    b0: Var,
    probed: &[Var],
    eps: &[Array2<f64>],
    z: &RawSinogram,
    pg: &PoissonGaussianParams,
    delta: f64,
) -> Result<Var, CoreError> {
    if probed.is_empty() || probed.len() != eps.len() {
        return Err(CoreError::Parameter("probe outputs and vectors must match".into()));
    }
    let n = z.len() as f64;
    let var = noise_variance(z, pg);
    let level = var.sum() / n;
    let zc = constant(g, z);
    let resid = g.sub(b0, zc)?;
    let fidelity = g.mean_squares(resid);
    let weight = 2.0 / (delta * probed.len() as f64 * n);
    let mut total = g.add_const(fidelity, &Tensor::scalar(-level))?;
    for (bp, e) in probed.iter().zip(eps) {
        let d = g.sub(*bp, b0)?;
        let w = Tensor::from_array2(&(e * &var * weight));
        let wd = g.mul_const(d, &w)?;
        let s = g.sum(wd);
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// `a(g(r(Z)))` for a raw input, returning the image and the raw output.
fn sure_branch<D: Denoiser + ?Sized>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    z: &RawSinogram,
) -> Result<(Var, Var), CoreError> {
    let input = ctx.fbp.fbp(&preprocess(z, &ctx.flat_dark)?)?;
    let x = constant(g, &input);
    let img = net.denoise(g, x)?;
    let proj = linear(g, img, ctx.projector.clone())?;
    let raw = inverse_preprocess_var(g, proj, &ctx.flat_dark)?;
    Ok((img, raw))
}

/// SURE loss and the reconstruction `g(r(Y))` it computed on the way.
fn sure_parts<D: Denoiser + ?Sized, R: Rng>(
    spec: &LossSpec,
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<(Var, Var), CoreError> {
    spec.validate()?;
    ctx.check_sample(sample)?;
    let z = &sample.raw;
    let delta = probe_step(z, spec.delta_rel)?;
    let eps = draw_probes(z.dim(), spec.probes, rng);
    let (img, b0) = sure_branch(ctx, g, net, z)?;
    let mut probed = Vec::with_capacity(eps.len());
    for e in &eps {
        let (_, bp) = sure_branch(ctx, g, net, &(z + &(e * delta)))?;
        probed.push(bp);
    }
    let loss = sure_pg_graph(g, b0, &probed, &eps, z, &ctx.pg, delta)?;
    Ok((loss, img))
}

/// `SURE_PG(a(g(r(Y))), Y)`.
pub fn sure_loss<D: Denoiser + ?Sized, R: Rng>(
    spec: &LossSpec,
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    Ok(sure_parts(spec, ctx, g, net, sample, rng)?.0)
}

/// Masked `‖X̃₁ − X̃₂‖²` over the image grid.
fn equivariance_term(ctx: &LossContext, g: &mut Graph, x1: Var, x2: Var) -> Result<Var, CoreError> {
    let x2 = g.mul_const(x2, &ctx.mask)?;
    Ok(g.mse(x1, x2)?)
}

fn rotated(ctx: &LossContext, g: &mut Graph, img: Var, angle: f64) -> Result<Var, CoreError> {
    let (rows, cols) = ctx.geometry.image_shape();
    linear(g, img, Arc::new(Rotation::new(rows, cols, angle)))
}

/// SURE plus `λ‖X̃₁ − X̃₂‖²` with `X̃₁ = t(g(r(Y)))` and
/// `X̃₂ = g(r(a(X̃₁) + N))` for fresh Poisson–Gaussian noise `N`.
pub fn rei_loss<D: Denoiser + ?Sized, R: Rng>(
    spec: &LossSpec,
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    Ok(rei_loss_with_noise(spec, ctx, g, net, sample, rng, None)?.0)
}

/// [`rei_loss`] that also returns the re-noising perturbation `N`.
///
/// `N` is drawn around `a(X̃₁)` and enters as a constant offset. Passing
/// `fixed_noise` replaces the draw (the rng is advanced identically), which
/// makes the loss a smooth function of the network parameters.
pub fn rei_loss_with_noise<D: Denoiser + ?Sized, R: Rng>(
    spec: &LossSpec,
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
    fixed_noise: Option<&RawSinogram>,
) -> Result<(Var, RawSinogram), CoreError> {
    let (sure, img) = sure_parts(spec, ctx, g, net, sample, rng)?;
    let angle = RotationSampler.sample(rng);
    let x1 = rotated(ctx, g, img, angle)?;
    let proj = linear(g, x1, ctx.projector.clone())?;
    let clean = inverse_preprocess_var(g, proj, &ctx.flat_dark)?;
    let clean_value = g.value(clean).to_array2()?;
    let noisy = sample_pg_noise(&ctx.pg, &clean_value.mapv(|v| v.max(0.0)), rng)?;
    let noise = match fixed_noise {
        Some(n) if n.dim() == clean_value.dim() => n.clone(),
        Some(_) => return Err(CoreError::Dimension("fixed noise does not match the sinogram".into())),
        None => &noisy - &clean_value,
    };
    let noisy_var = g.add_const(clean, &Tensor::from_array2(&noise))?;
    let pre = preprocess_var(g, noisy_var, &ctx.flat_dark)?;
    let input = linear(g, pre, ctx.fbp.clone())?;
    let x2 = net.denoise(g, input)?;
    let eq = equivariance_term(ctx, g, x1, x2)?;
    let weighted = g.scale(eq, spec.lambda);
    Ok((g.add(sure, weighted)?, noise))
}

/// Single-projection cross-validation plus `λ‖X̃₁ − X̃₂‖²` with
/// `X̃₁ = t(g(R_{J^c}Ỹ_{J^c}))` and `X̃₂ = g(R(A X̃₁ + N))`.
pub fn e2i_loss<D: Denoiser + ?Sized, R: Rng>(
    spec: &LossSpec,
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    spec.validate()?;
    ctx.check_sample(sample)?;
    let n = ctx.geometry.n_angles();
    if n < 2 {
        return Err(CoreError::Loss("cross-validation needs at least 2 projections".into()));
    }
    let j = rng.random_range(0..n);
    let (held_out, img) = e2i_cross_validation(ctx, g, net, sample, j)?;

    let angle = RotationSampler.sample(rng);
    let x1 = rotated(ctx, g, img, angle)?;
    let proj = linear(g, x1, ctx.projector.clone())?;
    let noise = sample_bg_noise(&ctx.bg, ctx.geometry.sino_shape(), rng);
    let noisy = g.add_const(proj, &Tensor::from_array2(&noise))?;
    let input = linear(g, noisy, ctx.fbp.clone())?;
    let x2 = net.denoise(g, input)?;
    let eq = equivariance_term(ctx, g, x1, x2)?;
    let weighted = g.scale(eq, spec.lambda);
    Ok(g.add(held_out, weighted)?)
}

/// `‖A_J g(R_{J^c}Ỹ_{J^c}) − Ỹ_J‖²` and the reconstruction it used.
pub fn e2i_cross_validation<D: Denoiser + ?Sized>(
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    j: usize,
) -> Result<(Var, Var), CoreError> {
    let n = ctx.geometry.n_angles();
    let target = ProjectionSubset::single(j, n)?;
    let rest = target.complement(n);
    let rest_fbp = FbpOperator::with_filter(restrict(&ctx.geometry, &rest)?, Arc::clone(&ctx.filter));
    let input = rest_fbp.fbp(&rest.select_rows(&sample.sino))?;
    let x = constant(g, &input);
    let img = net.denoise(g, x)?;
    let a_j = Arc::new(Projector::new(restrict(&ctx.geometry, &target)?));
    let proj = linear(g, img, a_j)?;
    let t = constant(g, &target.select_rows(&sample.sino));
    Ok((g.mse(proj, t)?, img))
}

/// Dispatches on `spec.method`.
pub fn loss<D: Denoiser + ?Sized, R: Rng>(
    spec: &LossSpec,
    ctx: &LossContext,
    g: &mut Graph,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<Var, CoreError> {
    spec.validate()?;
    match spec.method {
        Method::Sup => supervised_loss(ctx, g, net, sample),
        Method::N2i => n2i_loss(ctx, g, net, sample, rng),
        Method::S2i => s2i_loss(ctx, g, net, sample, rng),
        Method::P2p => p2p_loss(ctx, g, net, sample, rng),
        Method::Nn2i => nn2i_loss(ctx, g, net, sample, rng),
        Method::Sure => sure_loss(spec, ctx, g, net, sample, rng),
        Method::Rei => rei_loss(spec, ctx, g, net, sample, rng),
        Method::E2i => e2i_loss(spec, ctx, g, net, sample, rng),
    }
}

/// Loss value without recording a graph.
pub fn loss_value<D: Denoiser + ?Sized, R: Rng>(
    spec: &LossSpec,
    ctx: &LossContext,
    net: &D,
    sample: &TrainingSample,
    rng: &mut R,
) -> Result<f64, CoreError> {
    let mut g = Graph::inference();
    let v = loss(spec, ctx, &mut g, net, sample, rng)?;
    Ok(g.value(v).item())
}

/// Raw counts expected for a sinogram under the context's flat/dark.
pub fn expected_raw(ctx: &LossContext, sino: &Sinogram) -> Result<RawSinogram, CoreError> {
    inverse_preprocess(sino, &ctx.flat_dark)
}
