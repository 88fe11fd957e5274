//! Parallel-beam 2D geometry, a matrix-free line-length projector with its
//! exact adjoint, projection subsets, and filtered backprojection.
//!
//! Image pixel `(r, c)` covers a square of side `pixel_size` centred at
//! `x = (c - (k-1)/2) * pixel_size`, `y = ((j-1)/2 - r) * pixel_size`.
//! Detector bin `d` sits at offset `t = (d - (m-1)/2) * det_spacing * pixel_size`
//! and the ray at angle `θ` is the line `x cos θ + y sin θ = t`.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use ssct_nnkit::{LinearOp, Tensor};

use crate::{CoreError, Image, Sinogram};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    angles: Vec<f64>,
    n_det: usize,
    /// Detector bin width in image-pixel units.
    det_spacing: f64,
    img_rows: usize,
    img_cols: usize,
    /// Physical side length of one image pixel.
    pixel_size: f64,
}

impl Geometry {
    pub fn new(
        angles: Vec<f64>,
        n_det: usize,
        det_spacing: f64,
        img_rows: usize,
        img_cols: usize,
        pixel_size: f64,
    ) -> Result<Self, CoreError> {
        if angles.is_empty() {
            return Err(CoreError::Geometry("at least one angle is required".into()));
        }
        if n_det == 0 || img_rows == 0 || img_cols == 0 {
            return Err(CoreError::Geometry(format!(
                "detector ({n_det}) and image ({img_rows}x{img_cols}) sizes must be positive"
            )));
        }
        if !(det_spacing > 0.0 && pixel_size > 0.0) {
            return Err(CoreError::Geometry(
                "detector spacing and pixel size must be positive".into(),
            ));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::Geometry("angles must be strictly increasing".into()));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(CoreError::Geometry("angles must be finite".into()));
        }
        Ok(Self {
            angles,
            n_det,
            det_spacing,
            img_rows,
            img_cols,
            pixel_size,
        })
    }

    /// `n_angles` equispaced angles `i * range / n_angles` over `[0, range)`.
    pub fn parallel(
        n_angles: usize,
        range: f64,
        n_det: usize,
        det_spacing: f64,
        img_rows: usize,
        img_cols: usize,
        pixel_size: f64,
    ) -> Result<Self, CoreError> {
        let angles = (0..n_angles)
            .map(|i| i as f64 * range / n_angles as f64)
            .collect();
        Self::new(angles, n_det, det_spacing, img_rows, img_cols, pixel_size)
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
    pub fn n_det(&self) -> usize {
        self.n_det
    }
    pub fn det_spacing(&self) -> f64 {
        self.det_spacing
    }
    pub fn img_rows(&self) -> usize {
        self.img_rows
    }
    pub fn img_cols(&self) -> usize {
        self.img_cols
    }
    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }
    pub fn image_shape(&self) -> (usize, usize) {
        (self.img_rows, self.img_cols)
    }
    pub fn sino_shape(&self) -> (usize, usize) {
        (self.angles.len(), self.n_det)
    }

    fn check_image(&self, image: &Image) -> Result<(), CoreError> {
        if image.dim() != self.image_shape() {
            return Err(CoreError::Dimension(format!(
                "image is {:?}, geometry expects {:?}",
                image.dim(),
                self.image_shape()
            )));
        }
        Ok(())
    }

    fn check_sino(&self, sino: &Sinogram) -> Result<(), CoreError> {
        if sino.dim() != self.sino_shape() {
            return Err(CoreError::Dimension(format!(
                "sinogram is {:?}, geometry expects {:?} (angles x detector)",
                sino.dim(),
                self.sino_shape()
            )));
        }
        Ok(())
    }
}

/// A sorted set of projection indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionSubset {
    indices: Vec<usize>,
}

impl ProjectionSubset {
    /// Validates `indices` against `n_angles`; the result is sorted.
    pub fn new(mut indices: Vec<usize>, n_angles: usize) -> Result<Self, CoreError> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::Subset("duplicate projection index".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= n_angles {
                return Err(CoreError::Subset(format!(
                    "index {last} out of range for {n_angles} projections"
                )));
            }
        }
        Ok(Self { indices })
    }

    pub fn full(n_angles: usize) -> Self {
        Self {
            indices: (0..n_angles).collect(),
        }
    }

    pub fn single(index: usize, n_angles: usize) -> Result<Self, CoreError> {
        Self::new(vec![index], n_angles)
    }

    /// Every `parts`-th projection starting at `phase`.
    pub fn interleaved(n_angles: usize, parts: usize, phase: usize) -> Self {
        Self {
            indices: (phase..n_angles).step_by(parts.max(1)).collect(),
        }
    }

    /// The first `count` projections.
    pub fn leading(count: usize, n_angles: usize) -> Self {
        Self {
            indices: (0..count.min(n_angles)).collect(),
        }
    }

    pub fn complement(&self, n_angles: usize) -> Self {
        let mut keep = vec![true; n_angles];
        for &i in &self.indices {
            keep[i] = false;
        }
        Self {
            indices: (0..n_angles).filter(|&i| keep[i]).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Rows of `sino` at these indices.
    pub fn select_rows(&self, sino: &Sinogram) -> Sinogram {
        sino.select(ndarray::Axis(0), &self.indices)
    }
}

/// Geometry containing only the selected projection angles.
pub fn restrict(geom: &Geometry, subset: &ProjectionSubset) -> Result<Geometry, CoreError> {
    if subset.is_empty() {
        return Err(CoreError::Subset("cannot restrict to an empty subset".into()));
    }
    if subset.indices.iter().any(|&i| i >= geom.n_angles()) {
        return Err(CoreError::Subset("subset index out of range".into()));
    }
    let angles = subset.indices.iter().map(|&i| geom.angles[i]).collect();
    Ok(Geometry {
        angles,
        ..geom.clone()
    })
}

/// Ray-driven line-length projector `A` and its adjoint `Aᵀ`.
#[derive(Clone, Debug)]
pub struct Projector {
    geom: Geometry,
    trig: Vec<(f64, f64)>,
    /// Ray intersections, traced once on first use; `None` when the
    /// geometry exceeds [`RAY_TABLE_MAX_ENTRIES`].
    table: OnceLock<Option<Arc<RayTable>>>,
}

/// Upper bound on cached intersections (12 bytes each); larger geometries
/// are traced on the fly.
pub const RAY_TABLE_MAX_ENTRIES: usize = 1 << 24;

/// Intersections of every ray in angle-major order: ray `i` covers
/// `offsets[i]..offsets[i + 1]` of `pixels` and `weights`.
struct RayTable {
    offsets: Vec<usize>,
    pixels: Vec<u32>,
    weights: Vec<f64>,
}

impl std::fmt::Debug for RayTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RayTable")
            .field("entries", &self.pixels.len())
            .finish()
    }
}

impl RayTable {
    fn ray(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.pixels[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&p, &w)| (p as usize, w))
    }
}

/// Angles per backprojection block; partial images are summed in block order
/// so the result does not depend on the thread count.
const BACKPROJECT_BLOCK: usize = 8;

impl Projector {
    pub fn new(geom: Geometry) -> Self {
        let trig = geom.angles.iter().map(|a| (a.cos(), a.sin())).collect();
        Self {
            geom,
            trig,
            table: OnceLock::new(),
        }
    }

    fn table(&self) -> Option<&RayTable> {
        self.table
            .get_or_init(|| {
                let (n, m) = self.geom.sino_shape();
                let estimate = n * m * (self.geom.img_rows + self.geom.img_cols);
                if estimate > RAY_TABLE_MAX_ENTRIES || self.geom.img_rows * self.geom.img_cols > u32::MAX as usize {
                    return None;
                }
                let per_angle: Vec<(Vec<usize>, Vec<u32>, Vec<f64>)> = (0..n)
                    .into_par_iter()
                    .map_init(Vec::new, |buf, a| {
                        let (mut lens, mut pixels, mut weights) = (Vec::with_capacity(m), Vec::new(), Vec::new());
                        for d in 0..m {
                            let before = pixels.len();
                            self.trace(a, d, buf, |p, w| {
                                pixels.push(p as u32);
                                weights.push(w);
                            });
                            lens.push(pixels.len() - before);
                        }
                        (lens, pixels, weights)
                    })
                    .collect();
                let mut table = RayTable {
                    offsets: vec![0],
                    pixels: Vec::new(),
                    weights: Vec::new(),
                };
                for (lens, pixels, weights) in per_angle {
                    for l in lens {
                        table.offsets.push(table.offsets.last().expect("non-empty") + l);
                    }
                    table.pixels.extend(pixels);
                    table.weights.extend(weights);
                }
                Some(Arc::new(table))
            })
            .as_deref()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    /// Visits `(pixel index, intersection length)` for every pixel crossed by
    /// ray `(angle, det)`.
    fn trace(&self, angle: usize, det: usize, buf: &mut Vec<f64>, mut visit: impl FnMut(usize, f64)) {
        let g = &self.geom;
        let (rows, cols) = (g.img_rows as f64, g.img_cols as f64);
        let (cos, sin) = self.trig[angle];
        let t = (det as f64 - (g.n_det as f64 - 1.0) / 2.0) * g.det_spacing;
        // Continuous pixel coordinates: X along columns in [0, cols], Y along
        // rows in [0, rows]; the ray is P(s) = P0 + s D with |D| = 1 pixel.
        let p0 = (cols / 2.0 + t * cos, rows / 2.0 - t * sin);
        let d = (-sin, -cos);

        let mut s_lo = f64::NEG_INFINITY;
        let mut s_hi = f64::INFINITY;
        for (p, dv, extent) in [(p0.0, d.0, cols), (p0.1, d.1, rows)] {
            if dv.abs() < 1e-12 {
                if p <= 0.0 || p >= extent {
                    return;
                }
            } else {
                let a = (0.0 - p) / dv;
                let b = (extent - p) / dv;
                s_lo = s_lo.max(a.min(b));
                s_hi = s_hi.min(a.max(b));
            }
        }
        if s_hi <= s_lo {
            return;
        }

        buf.clear();
        buf.push(s_lo);
        let push_planes = |p: f64, dv: f64, buf: &mut Vec<f64>| {
            if dv.abs() < 1e-12 {
                return;
            }
            let a = p + s_lo * dv;
            let b = p + s_hi * dv;
            let (lo, hi) = (a.min(b), a.max(b));
            let first = lo.floor() as i64 + 1;
            let last = hi.ceil() as i64 - 1;
            for plane in first..=last {
                buf.push((plane as f64 - p) / dv);
            }
        };
        push_planes(p0.0, d.0, buf);
        push_planes(p0.1, d.1, buf);
        buf.push(s_hi);
        buf.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite crossings"));

        let ps = g.pixel_size;
        let (ncols, nrows) = (g.img_cols, g.img_rows);
        for w in buf.windows(2) {
            let len = w[1] - w[0];
            if len <= 1e-12 {
                continue;
            }
            let mid = 0.5 * (w[0] + w[1]);
            let c = ((p0.0 + mid * d.0).floor() as isize).clamp(0, ncols as isize - 1) as usize;
            let r = ((p0.1 + mid * d.1).floor() as isize).clamp(0, nrows as isize - 1) as usize;
            visit(r * ncols + c, len * ps);
        }
    }

    /// `A x`, returned as an angles × detector sinogram.
    pub fn project(&self, image: &Image) -> Result<Sinogram, CoreError> {
        self.geom.check_image(image)?;
        let flat = image.as_standard_layout();
        let x = flat.as_slice().expect("standard layout");
        Ok(self.project_slice(x))
    }

    fn project_slice(&self, x: &[f64]) -> Sinogram {
        let (n, m) = self.geom.sino_shape();
        let table = self.table();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map_init(Vec::new, |buf, a| {
                (0..m)
                    .map(|d| {
                        let mut acc = 0.0;
                        match table {
                            Some(t) => t.ray(a * m + d).for_each(|(p, w)| acc += w * x[p]),
                            None => self.trace(a, d, buf, |p, w| acc += w * x[p]),
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        Array2::from_shape_vec((n, m), rows.concat()).expect("sinogram shape")
    }

    /// `Aᵀ y`.
    pub fn backproject(&self, sino: &Sinogram) -> Result<Image, CoreError> {
        self.geom.check_sino(sino)?;
        let flat = sino.as_standard_layout();
        Ok(self.backproject_slice(flat.as_slice().expect("standard layout")))
    }

    fn backproject_slice(&self, y: &[f64]) -> Image {
        let (n, m) = self.geom.sino_shape();
        let (rows, cols) = self.geom.image_shape();
        let table = self.table();
        let blocks: Vec<Vec<f64>> = (0..n.div_ceil(BACKPROJECT_BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut img = vec![0.0; rows * cols];
                let mut buf = Vec::new();
                for a in b * BACKPROJECT_BLOCK..((b + 1) * BACKPROJECT_BLOCK).min(n) {
                    for d in 0..m {
                        let v = y[a * m + d];
                        if v == 0.0 {
                            continue;
                        }
                        match table {
                            Some(t) => t.ray(a * m + d).for_each(|(p, w)| img[p] += w * v),
                            None => self.trace(a, d, &mut buf, |p, w| img[p] += w * v),
                        }
                    }
                }
                img
            })
            .collect();
        let mut out = vec![0.0; rows * cols];
        for block in &blocks {
            for (o, v) in out.iter_mut().zip(block) {
                *o += v;
            }
        }
        Array2::from_shape_vec((rows, cols), out).expect("image shape")
    }
}

impl LinearOp for Projector {
    fn input_len(&self) -> usize {
        self.geom.img_rows * self.geom.img_cols
    }
    fn input_shape(&self) -> Vec<usize> {
        vec![self.geom.img_rows, self.geom.img_cols]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.geom.n_angles(), self.geom.n_det]
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        let s = self.project_slice(x.data());
        Tensor::from_array2(&s)
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        let i = self.backproject_slice(y.data());
        Tensor::from_array2(&i)
    }
}

/// Frequency window applied on top of the ramp.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterWindow {
    #[default]
    None,
    Hann,
}

/// Zero-padded FFT ramp filter built from the band-limited spatial kernel.
pub struct RampFilter {
    padded: usize,
    n_det: usize,
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for RampFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RampFilter")
            .field("padded", &self.padded)
            .field("n_det", &self.n_det)
            .finish()
    }
}

impl RampFilter {
    /// `spacing` is the physical detector bin width.
    pub fn new(n_det: usize, spacing: f64, window: FilterWindow) -> Self {
        let padded = (2 * n_det).next_power_of_two().max(64);
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        kernel[0].re = 1.0 / (4.0 * spacing * spacing);
        for i in 1..=padded / 2 {
            if i % 2 == 1 {
                let v = -1.0 / (PI * PI * (i * i) as f64 * spacing * spacing);
                kernel[i].re = v;
                kernel[padded - i].re = v;
            }
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);
        fft.process(&mut kernel);
        let half = padded as f64 / 2.0;
        let response = kernel
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let f = if i as f64 <= half { i as f64 } else { padded as f64 - i as f64 };
                let w = match window {
                    FilterWindow::None => 1.0,
                    FilterWindow::Hann => 0.5 * (1.0 + (PI * f / half).cos()),
                };
                // Discrete convolution integral: multiply by the bin width.
                c.re * spacing * w / padded as f64
            })
            .collect();
        Self {
            padded,
            n_det,
            response,
            fft,
            ifft,
        }
    }

    /// Filters one detector row into `out`.
    pub fn filter_row(&self, row: ArrayView1<'_, f64>, out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&self.response) {
            *b *= r;
        }
        self.ifft.process(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf[..self.n_det]) {
            *o = b.re;
        }
    }

    pub fn filter(&self, sino: &Sinogram) -> Sinogram {
        let mut out = Array2::zeros(sino.dim());
        for (row, mut dst) in sino.rows().into_iter().zip(out.rows_mut()) {
            let mut tmp = vec![0.0; self.n_det];
            self.filter_row(row, &mut tmp);
            for (d, v) in dst.iter_mut().zip(tmp) {
                *d = v;
            }
        }
        out
    }
}

/// Filtered backprojection `R`: ramp filter along the detector, then
/// backprojection with angular weight `π / n_angles`.
#[derive(Clone, Debug)]
pub struct FbpOperator {
    projector: Projector,
    filter: Arc<RampFilter>,
    scale: f64,
}

impl FbpOperator {
    pub fn new(geom: Geometry, window: FilterWindow) -> Self {
        let spacing = geom.det_spacing * geom.pixel_size;
        let filter = Arc::new(RampFilter::new(geom.n_det, spacing, window));
        Self::with_filter(geom, filter)
    }

    /// Shares an already planned filter (must match the detector).
    pub fn with_filter(geom: Geometry, filter: Arc<RampFilter>) -> Self {
        let spacing = geom.det_spacing * geom.pixel_size;
        // Σ_d L(ray d, pixel) ≈ pixel_size² / spacing per angle.
        let scale = PI / geom.n_angles() as f64 * spacing / (geom.pixel_size * geom.pixel_size);
        Self {
            projector: Projector::new(geom),
            filter,
            scale,
        }
    }

    pub fn filter_handle(&self) -> Arc<RampFilter> {
        Arc::clone(&self.filter)
    }

    pub fn geometry(&self) -> &Geometry {
        self.projector.geometry()
    }

    pub fn fbp(&self, sino: &Sinogram) -> Result<Image, CoreError> {
        self.geometry().check_sino(sino)?;
        let filtered = self.filter.filter(sino);
        let mut img = self.projector.backproject(&filtered)?;
        img.mapv_inplace(|v| v * self.scale);
        Ok(img)
    }

    /// `Rᵀ x`: the ramp filter is symmetric, so this is `filter(scale · A x)`.
    pub fn fbp_adjoint(&self, image: &Image) -> Result<Sinogram, CoreError> {
        let mut s = self.projector.project(image)?;
        s.mapv_inplace(|v| v * self.scale);
        Ok(self.filter.filter(&s))
    }
}

impl LinearOp for FbpOperator {
    fn input_len(&self) -> usize {
        let (n, m) = self.geometry().sino_shape();
        n * m
    }
    fn input_shape(&self) -> Vec<usize> {
        let (n, m) = self.geometry().sino_shape();
        vec![n, m]
    }
    fn output_shape(&self) -> Vec<usize> {
        let (r, c) = self.geometry().image_shape();
        vec![r, c]
    }
    fn apply(&self, y: &Tensor) -> Tensor {
        let (n, m) = self.geometry().sino_shape();
        let s = Array2::from_shape_vec((n, m), y.data().to_vec()).expect("length checked");
        Tensor::from_array2(&self.fbp(&s).expect("shape checked"))
    }
    fn adjoint(&self, x: &Tensor) -> Tensor {
        let (r, c) = self.geometry().image_shape();
        let img = Array2::from_shape_vec((r, c), x.data().to_vec()).expect("length checked");
        Tensor::from_array2(&self.fbp_adjoint(&img).expect("shape checked"))
    }
}

/// Convenience: `fbp` with a default (unwindowed) filter.
pub fn fbp(sino: &Sinogram, geom: &Geometry) -> Result<Image, CoreError> {
    FbpOperator::new(geom.clone(), FilterWindow::None).fbp(sino)
}

pub fn project(image: &Image, geom: &Geometry) -> Result<Sinogram, CoreError> {
    Projector::new(geom.clone()).project(image)
}

pub fn backproject(sino: &Sinogram, geom: &Geometry) -> Result<Image, CoreError> {
    Projector::new(geom.clone()).backproject(sino)
}
