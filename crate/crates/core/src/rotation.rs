//! Image rotation by bilinear interpolation, restricted to the inscribed disk.

use std::f64::consts::PI;

use rand::Rng;
use ssct_nnkit::{LinearOp, Tensor};

use crate::Image;

/// Indicator of the disk inscribed in a `rows × cols` grid (pixel centres).
pub fn disk_mask(rows: usize, cols: usize) -> Vec<f64> {
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let radius = rows.min(cols) as f64 / 2.0;
    let mut mask = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            mask.push(if dy * dy + dx * dx <= radius * radius { 1.0 } else { 0.0 });
        }
    }
    mask
}

/// Counter-clockwise rotation about the image centre followed by the disk
/// mask. Linear, with an exact adjoint.
#[derive(Clone, Debug)]
pub struct Rotation {
    rows: usize,
    cols: usize,
    angle: f64,
    /// Up to four `(source index, weight)` taps per output pixel; the mask is
    /// folded into the weights.
    taps: Vec<[(usize, f64); 4]>,
}

impl Rotation {
    pub fn new(rows: usize, cols: usize, angle: f64) -> Self {
        let mask = disk_mask(rows, cols);
        let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
        let (cos, sin) = (angle.cos(), angle.sin());
        let mut taps = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut t = [(0usize, 0.0f64); 4];
                let m = mask[r * cols + c];
                if m != 0.0 {
                    // Inverse map: rotate the output offset by -angle. Row
                    // index grows downwards, so y = -(r - cy).
                    let (x, y) = (c as f64 - cx, cy - r as f64);
                    let sx = cos * x + sin * y;
                    let sy = -sin * x + cos * y;
                    let (fc, fr) = (sx + cx, cy - sy);
                    let (c0, r0) = (fc.floor(), fr.floor());
                    let (ac, ar) = (fc - c0, fr - r0);
                    let corners = [
                        (r0, c0, (1.0 - ar) * (1.0 - ac)),
                        (r0, c0 + 1.0, (1.0 - ar) * ac),
                        (r0 + 1.0, c0, ar * (1.0 - ac)),
                        (r0 + 1.0, c0 + 1.0, ar * ac),
                    ];
                    for (slot, (rr, cc, w)) in t.iter_mut().zip(corners) {
                        if rr >= 0.0 && cc >= 0.0 && (rr as usize) < rows && (cc as usize) < cols {
                            *slot = (rr as usize * cols + cc as usize, w * m);
                        }
                    }
                }
                taps.push(t);
            }
        }
        Self {
            rows,
            cols,
            angle,
            taps,
        }
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn rotate(&self, image: &Image) -> Image {
        let flat = image.as_standard_layout();
        let data = self.apply_slice(flat.as_slice().expect("standard layout"));
        Image::from_shape_vec((self.rows, self.cols), data).expect("shape")
    }

    fn apply_slice(&self, x: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * x[i]).sum())
            .collect()
    }

    fn adjoint_slice(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for (t, &v) in self.taps.iter().zip(y) {
            for &(i, w) in t {
                out[i] += w * v;
            }
        }
        out
    }
}

impl LinearOp for Rotation {
    fn input_len(&self) -> usize {
        self.rows * self.cols
    }
    fn input_shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
    fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::new(self.output_shape(), self.apply_slice(x.data())).expect("shape")
    }
    fn adjoint(&self, y: &Tensor) -> Tensor {
        Tensor::new(self.input_shape(), self.adjoint_slice(y.data())).expect("shape")
    }
}

/// Draws rotation angles uniformly from `[0, 2π)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct RotationSampler;

impl RotationSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        rng.random_range(0.0..2.0 * PI)
    }
}
