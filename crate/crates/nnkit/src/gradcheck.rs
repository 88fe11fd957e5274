//! Central finite-difference checks of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::{NnError, Tensor};

/// Outcome of a gradient check: the worst relative error over all probes.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub probes: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares the reverse-mode gradient of a scalar function of one leaf with
/// central differences along `n_dirs` random ±1 directions (relative error
/// per direction) and, when the input is small, along every coordinate
/// (normwise relative error of the whole gradient vector).
pub fn check<F>(build: F, x0: &Tensor, step: f64, n_dirs: usize, seed: u64) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NnError>,
{
    let eval = |x: &Tensor| -> Result<f64, NnError> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let out = build(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let central = |dir: &Tensor| -> Result<f64, NnError> {
        let plus = x0.zip_map(dir, |a, d| a + step * d);
        let minus = x0.zip_map(dir, |a, d| a - step * d);
        Ok((eval(&plus)? - eval(&minus)?) / (2.0 * step))
    };

    let mut g = Graph::new();
    let v = g.leaf(x0.clone());
    let out = build(&mut g, v)?;
    let grads = g.backward(out)?;
    let grad = grads.get_or_zeros(v, x0.shape());

    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_dirs {
        let signs = (0..x0.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let dir = Tensor::new(x0.shape().to_vec(), signs)?;
        worst = worst.max(rel_err(grad.dot(&dir), central(&dir)?));
        probes += 1;
    }
    if x0.len() <= 64 {
        let mut fd = Vec::with_capacity(x0.len());
        for i in 0..x0.len() {
            let mut dir = Tensor::zeros(x0.shape());
            dir.data_mut()[i] = 1.0;
            fd.push(central(&dir)?);
            probes += 1;
        }
        let diff: f64 = fd.iter().zip(grad.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let na: f64 = grad.data().iter().map(|v| v * v).sum();
        let nf: f64 = fd.iter().map(|v| v * v).sum();
        worst = worst.max(if na.max(nf) < 1e-24 {
            0.0
        } else {
            diff.sqrt() / na.max(nf).sqrt()
        });
    }
    Ok(GradCheck {
        max_rel_error: worst,
        probes,
    })
}
