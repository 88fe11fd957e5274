//! Differentiable primitives recorded on a [`Graph`].

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

use crate::graph::{Graph, Var};
use crate::{NnError, Tensor};

/// A linear map with an explicit adjoint, usable inside a graph.
///
/// `adjoint` must be the exact transpose of `apply` under the standard inner
/// product; gradients through [`Graph::linear`] rely on it.
pub trait LinearOp: Send + Sync {
    fn input_len(&self) -> usize;
    fn output_shape(&self) -> Vec<usize>;
    fn input_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &Tensor) -> Tensor;
    fn adjoint(&self, y: &Tensor) -> Tensor;
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, p| {
                vec![
                    Some(g.zip_map(p[1], |gv, bv| gv * bv)),
                    Some(g.zip_map(p[0], |gv, av| gv * av)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.custom(&[a], out, Box::new(move |g, _| vec![Some(g.map(|v| v * s))]))
    }

    /// `a + c` for a constant tensor `c`.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, NnError> {
        same_shape(self.value(a), c, "add_const")?;
        let out = self.value(a).zip_map(c, |x, y| x + y);
        Ok(self.custom(&[a], out, Box::new(|g, _| vec![Some(g.clone())])))
    }

    /// `a ⊙ c` for a constant tensor `c`.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var, NnError> {
        same_shape(self.value(a), c, "mul_const")?;
        let out = self.value(a).zip_map(c, |x, y| x * y);
        let c = c.clone();
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&c, |gv, cv| gv * cv))]),
        ))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let saved = out.clone();
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| vec![Some(g.zip_map(&saved, |gv, e| gv * e))]),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.custom(
            &[a],
            out,
            Box::new(move |g, p| {
                vec![Some(g.zip_map(p[0], |gv, x| if x > 0.0 { gv } else { slope * gv }))]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.custom(
            &[a],
            out,
            Box::new(|g, p| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.dot(v));
        self.custom(
            &[a],
            out,
            Box::new(|g, p| {
                let s = 2.0 * g.item();
                vec![Some(p[0].map(|x| s * x))]
            }),
        )
    }

    /// Mean of squared entries.
    pub fn mean_squares(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_squares(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let d = self.sub(a, b)?;
        Ok(self.mean_squares(d))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let src = self.value(a);
        let src_shape = src.shape().to_vec();
        let out = src.clone().reshaped(shape)?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                vec![Some(g.clone().reshaped(&src_shape).expect("same length"))]
            }),
        ))
    }

    /// Applies a linear operator; the backward pass uses its adjoint.
    pub fn linear(&mut self, a: Var, op: Arc<dyn LinearOp>) -> Result<Var, NnError> {
        let x = self.value(a);
        if x.len() != op.input_len() {
            return Err(NnError::Shape(format!(
                "linear operator expects {} values ({:?}), got shape {:?}",
                op.input_len(),
                op.input_shape(),
                x.shape()
            )));
        }
        let in_shape = x.shape().to_vec();
        let out = op.apply(x);
        Ok(self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                let back = op.adjoint(g);
                vec![Some(back.reshaped(&in_shape).expect("adjoint preserves length"))]
            }),
        ))
    }

    /// Same-padded 2D convolution (cross-correlation) of a `[C_in, H, W]`
    /// input with `[C_out, C_in, K, K]` weights, `K` odd.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, NnError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let [cin, h, w] = xs[..] else {
            return Err(NnError::Shape(format!("conv2d input must be [C,H,W], got {xs:?}")));
        };
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(NnError::Shape(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(NnError::Shape(format!(
                "conv2d weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(NnError::Shape(format!(
                    "conv2d bias must be [{cout}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let k = kh;
        let hw = h * w;
        let ckk = cin * k * k;

        let cols = im2col(self.value(x).data(), cin, h, w, k);
        let wmat = ArrayView2::from_shape((cout, ckk), self.value(weight).data()).expect("weight");
        let cols_v = ArrayView2::from_shape((ckk, hw), &cols).expect("cols");
        let mut out = Array2::<f64>::zeros((cout, hw));
        general_mat_mul(1.0, &wmat, &cols_v, 0.0, &mut out);
        let mut out = out.into_raw_vec_and_offset().0;
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (co, row) in out.chunks_mut(hw).enumerate() {
                for v in row {
                    *v += bv[co];
                }
            }
        }
        let out = Tensor::new(vec![cout, h, w], out)?;

        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.custom(
            &parents,
            out,
            Box::new(move |g, p| {
                let gmat = ArrayView2::from_shape((cout, hw), g.data()).expect("grad");
                let cols = im2col(p[0].data(), cin, h, w, k);
                let cols_v = ArrayView2::from_shape((ckk, hw), &cols).expect("cols");
                let wmat = ArrayView2::from_shape((cout, ckk), p[1].data()).expect("weight");

                let mut dw = Array2::<f64>::zeros((cout, ckk));
                general_mat_mul(1.0, &gmat, &cols_v.t(), 0.0, &mut dw);
                let mut dcols = Array2::<f64>::zeros((ckk, hw));
                general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut dcols);
                let dx = col2im(dcols.as_slice().expect("standard layout"), cin, h, w, k);

                let mut grads = vec![
                    Some(Tensor::new(vec![cin, h, w], dx).expect("dx")),
                    Some(
                        Tensor::new(vec![cout, cin, k, k], dw.into_raw_vec_and_offset().0)
                            .expect("dw"),
                    ),
                ];
                if has_bias {
                    let db = g.data().chunks(hw).map(|r| r.iter().sum()).collect();
                    grads.push(Some(Tensor::new(vec![cout], db).expect("db")));
                }
                grads
            }),
        ))
    }

    /// 2×2 average pooling with stride 2 on `[C, H, W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).shape().to_vec();
        let [c, h, w] = s[..] else {
            return Err(NnError::Shape(format!("avg_pool2 needs [C,H,W], got {s:?}")));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape(format!("avg_pool2 needs even H and W, got {s:?}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let a = base + 2 * i * w + 2 * j;
                    out[ch * oh * ow + i * ow + j] =
                        0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let base = ch * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = 0.25 * gd[ch * oh * ow + i * ow + j];
                            let a = base + 2 * i * w + 2 * j;
                            dx[a] += v;
                            dx[a + 1] += v;
                            dx[a + w] += v;
                            dx[a + w + 1] += v;
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], dx).expect("dx"))]
            }),
        ))
    }

    /// Nearest-neighbour 2× upsampling on `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).shape().to_vec();
        let [c, h, w] = s[..] else {
            return Err(NnError::Shape(format!("upsample2 needs [C,H,W], got {s:?}")));
        };
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[ch * oh * ow + i * ow + j] = src[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            dx[ch * h * w + (i / 2) * w + j / 2] += gd[ch * oh * ow + i * ow + j];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![c, h, w], dx).expect("dx"))]
            }),
        ))
    }

    /// Concatenates two `[C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(NnError::Shape(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let na = self.value(a).len();
        let mut data = Vec::with_capacity(na + self.value(b).len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2]], data)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |g, _| {
                let (ga, gb) = g.data().split_at(na);
                vec![
                    Some(Tensor::new(sa.clone(), ga.to_vec()).expect("ga")),
                    Some(Tensor::new(sb.clone(), gb.to_vec()).expect("gb")),
                ]
            }),
        ))
    }
}

/// Unfolds `[C, H, W]` into a `(C·K·K) × (H·W)` patch matrix with zero padding.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = &plane[si as usize * w..(si as usize + 1) * w];
                    let dst_row = &mut dst[i * w..(i + 1) * w];
                    let j_lo = (-dj).max(0) as usize;
                    let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
                    for j in j_lo..j_hi {
                        dst_row[j] = src_row[(j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &mut x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let j_lo = (-dj).max(0) as usize;
                    let j_hi = (w as isize - dj).min(w as isize).max(0) as usize;
                    for j in j_lo..j_hi {
                        plane[si as usize * w + (j as isize + dj) as usize] += src[i * w + j];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 5, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let ax = im2col(&x, c, h, w, k);
        let aty = col2im(&y, c, h, w, k);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::inference();
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0;
        let xv = g.constant(x.clone());
        let wv = g.constant(Tensor::new(vec![1, 1, 3, 3], wdata).unwrap());
        let y = g.conv2d(xv, wv, None).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let mut g = Graph::inference();
        let xv = g.constant(Tensor::zeros(&[2, 4, 4]));
        let wv = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.conv2d(xv, wv, None).is_err());
    }

    #[test]
    fn backward_requires_recording() {
        let mut g = Graph::inference();
        let a = g.leaf(Tensor::scalar(1.0));
        let s = g.sum_squares(a);
        assert!(matches!(g.backward(s), Err(NnError::NotRecorded)));
    }

    #[test]
    fn squared_error_gradient_vanishes_at_target() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let a = g.leaf(t.clone());
        let b = g.constant(t);
        let l = g.mse(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
