#![allow(dead_code)]

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssct_core::losses::{LossContext, TrainingSample};
use ssct_core::simulation::{
    preprocess, simulate_raw, BlurredGaussianNoiseModel, FlatDark, NoiseMode, PhysicsParams,
    PoissonGaussianParams,
};
use ssct_core::tomo::{FilterWindow, Geometry, Projector};
use ssct_core::Image;
use ssct_nnkit::{Denoiser, Graph, NnError, Tensor, UNet, UNetConfig, Var};

pub fn geometry(n: usize, angles: usize) -> Geometry {
    let n_det = (n as f64 * 1.5).ceil() as usize;
    let spacing = n as f64 * 2f64.sqrt() / n_det as f64;
    Geometry::parallel(angles, PI, n_det, spacing, n, n, 2.0 / n as f64).unwrap()
}

/// Disk of attenuation 1 with an off-centre disk of 0.5 inside.
pub fn phantom(n: usize) -> Image {
    let c = (n as f64 - 1.0) / 2.0;
    Image::from_shape_fn((n, n), |(r, col)| {
        let (y, x) = (r as f64 - c, col as f64 - c);
        let outer = (y * y + x * x).sqrt() <= 0.35 * n as f64;
        let inner = ((y - 0.1 * n as f64).powi(2) + (x + 0.08 * n as f64).powi(2)).sqrt()
            <= 0.12 * n as f64;
        match (outer, inner) {
            (true, true) => 0.5,
            (true, false) => 1.0,
            _ => 0.0,
        }
    })
}

pub struct Fixture {
    pub ctx: LossContext,
    pub sample: TrainingSample,
    pub params: PhysicsParams,
    pub projector: Projector,
}

pub fn fixture(n: usize, angles: usize, mode: NoiseMode, seed: u64) -> Fixture {
    let geom = geometry(n, angles);
    let params = PhysicsParams::default();
    let projector = Projector::new(geom.clone());
    let truth = phantom(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = simulate_raw(&truth, &projector, &params, mode, &mut rng).unwrap();
    let fd = FlatDark::uniform(geom.n_det(), params.gain * params.photon_count + params.dark_mean, params.dark_mean)
        .unwrap();
    let sino = preprocess(&raw, &fd).unwrap();
    let bg = BlurredGaussianNoiseModel::new(0.05, params.kernel()).unwrap();
    let pg = PoissonGaussianParams::new(params.gain, params.dark_variance.sqrt()).unwrap();
    let ctx = LossContext::new(geom, FilterWindow::None, fd, bg, pg).unwrap();
    Fixture {
        ctx,
        sample: TrainingSample {
            raw,
            sino,
            truth: Some(truth),
        },
        params,
        projector,
    }
}

pub fn tiny_net(seed: u64) -> UNet {
    UNet::new(
        UNetConfig {
            depth: 2,
            base_channels: 4,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

/// Ignores its input and returns a fixed image.
pub struct FixedOutput(pub Image);

impl Denoiser for FixedOutput {
    fn denoise(&self, g: &mut Graph, _x: Var) -> Result<Var, NnError> {
        Ok(g.constant(Tensor::from_array2(&self.0)))
    }
}

/// Always returns zero.
pub struct ZeroOutput;

impl Denoiser for ZeroOutput {
    fn denoise(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let shape = g.value(x).shape().to_vec();
        Ok(g.constant(Tensor::zeros(&shape)))
    }
}
