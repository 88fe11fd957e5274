//! U-Net style encoder–decoder denoiser.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::{NnError, Tensor};

/// Anything that maps an image to an image inside a graph.
pub trait Denoiser {
    fn denoise(&self, graph: &mut Graph, x: Var) -> Result<Var, NnError>;
}

/// Identity map; used to evaluate losses with `g = id`.
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, _graph: &mut Graph, x: Var) -> Result<Var, NnError> {
        Ok(x)
    }
}

/// Wraps a denoiser and counts how often it is invoked.
pub struct CallCounter<'a, D: Denoiser + ?Sized> {
    inner: &'a D,
    calls: Cell<u64>,
}

impl<'a, D: Denoiser + ?Sized> CallCounter<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }

    pub fn reset(&self) {
        self.calls.set(0);
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CallCounter<'_, D> {
    fn denoise(&self, graph: &mut Graph, x: Var) -> Result<Var, NnError> {
        self.calls.set(self.calls.get() + 1);
        self.inner.denoise(graph, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Number of 2× downsampling levels.
    pub depth: usize,
    /// Channels at the finest level; doubled at every level below.
    pub base_channels: usize,
    /// Negative slope of the leaky rectifier.
    pub leaky_slope: f64,
    /// Replaces every nonlinearity with the identity (test mode).
    pub linear: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            leaky_slope: 0.01,
            linear: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    params: Vec<NamedParam>,
}

struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
}

fn layer_specs(cfg: &UNetConfig) -> Vec<ConvSpec> {
    let ch = |l: usize| cfg.base_channels << l;
    let conv = |name: String, cin, cout| ConvSpec {
        name,
        cin,
        cout,
        k: 3,
        bias: true,
    };
    let mut specs = Vec::new();
    let mut cin = 1;
    for l in 0..cfg.depth {
        specs.push(conv(format!("enc{l}.conv1"), cin, ch(l)));
        specs.push(conv(format!("enc{l}.conv2"), ch(l), ch(l)));
        cin = ch(l);
    }
    specs.push(conv("mid.conv1".into(), cin, ch(cfg.depth)));
    specs.push(conv("mid.conv2".into(), ch(cfg.depth), ch(cfg.depth)));
    for l in (0..cfg.depth).rev() {
        specs.push(conv(format!("dec{l}.up"), ch(l + 1), ch(l)));
        specs.push(conv(format!("dec{l}.conv1"), 2 * ch(l), ch(l)));
        specs.push(conv(format!("dec{l}.conv2"), ch(l), ch(l)));
    }
    specs.push(ConvSpec {
        name: "out".into(),
        cin: ch(0),
        cout: 1,
        k: 1,
        bias: false,
    });
    specs
}

impl UNet {
    /// Fan-in scaled uniform initialisation, deterministic in `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self, NnError> {
        validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in layer_specs(&config) {
            let fan_in = (spec.cin * spec.k * spec.k) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let n = spec.cout * spec.cin * spec.k * spec.k;
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(NamedParam {
                name: format!("{}.weight", spec.name),
                value: Tensor::new(vec![spec.cout, spec.cin, spec.k, spec.k], w)?,
            });
            if spec.bias {
                let b: Vec<f64> = (0..spec.cout).map(|_| rng.random_range(-bound..bound)).collect();
                params.push(NamedParam {
                    name: format!("{}.bias", spec.name),
                    value: Tensor::new(vec![spec.cout], b)?,
                });
            }
        }
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeroed(config: UNetConfig) -> Result<Self, NnError> {
        let mut net = Self::new(config, 0)?;
        for p in &mut net.params {
            p.value.data_mut().fill(0.0);
        }
        Ok(net)
    }

    /// Rebuilds a network from named parameters, checking names and shapes
    /// against the architecture implied by `config`.
    pub fn from_params(config: UNetConfig, params: Vec<NamedParam>) -> Result<Self, NnError> {
        let reference = Self::zeroed(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(NnError::Config(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (r, p) in reference.params.iter().zip(&params) {
            if r.name != p.name || r.value.shape() != p.value.shape() {
                return Err(NnError::Config(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    r.name,
                    r.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers the parameters as leaves of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundUNet<'_> {
        let vars = self.params.iter().map(|p| graph.leaf(p.value.clone())).collect();
        BoundUNet { net: self, vars }
    }

    /// Uses caller-provided parameter nodes, in [`UNet::params`] order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundUNet<'_>, NnError> {
        if vars.len() != self.params.len() {
            return Err(NnError::Config(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(BoundUNet { net: self, vars })
    }

    /// Evaluates the network on a single image without recording gradients.
    pub fn infer(&self, image: &Tensor) -> Result<Tensor, NnError> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g);
        let x = g.constant(image.clone());
        let y = bound.denoise(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

fn validate(cfg: &UNetConfig) -> Result<(), NnError> {
    if cfg.depth == 0 || cfg.base_channels == 0 {
        return Err(NnError::Config(format!(
            "depth and base_channels must be positive, got {} and {}",
            cfg.depth, cfg.base_channels
        )));
    }
    Ok(())
}

/// Frozen network: parameters enter the graph as constants on every call.
impl Denoiser for UNet {
    fn denoise(&self, graph: &mut Graph, x: Var) -> Result<Var, NnError> {
        let vars = self.params.iter().map(|p| graph.constant(p.value.clone())).collect();
        self.bind_vars(vars)?.denoise(graph, x)
    }
}

/// A [`UNet`] whose parameters live on a particular graph.
pub struct BoundUNet<'a> {
    net: &'a UNet,
    vars: Vec<Var>,
}

impl BoundUNet<'_> {
    /// Parameter leaves in the same order as [`UNet::params`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        if self.net.config.linear {
            x
        } else {
            g.leaky_relu(x, self.net.config.leaky_slope)
        }
    }
}

impl Denoiser for BoundUNet<'_> {
    fn denoise(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let cfg = &self.net.config;
        let in_shape = g.value(x).shape().to_vec();
        let (h, w) = match in_shape[..] {
            [h, w] | [1, h, w] => (h, w),
            _ => return Err(NnError::Shape(format!("denoiser input must be an image, got {in_shape:?}"))),
        };
        let f = 1usize << cfg.depth;
        if h % f != 0 || w % f != 0 {
            return Err(NnError::Shape(format!(
                "image {h}x{w} is not divisible by 2^depth = {f}"
            )));
        }

        let mut p = self.vars.iter().copied();
        let mut next = || p.next().expect("parameter list matches architecture");
        let mut conv = |g: &mut Graph, x: Var, act: bool| -> Result<Var, NnError> {
            let wv = next();
            let bv = next();
            let y = g.conv2d(x, wv, Some(bv))?;
            Ok(if act { self.act(g, y) } else { y })
        };

        let mut cur = g.reshape(x, &[1, h, w])?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            cur = conv(g, cur, true)?;
            cur = conv(g, cur, true)?;
            skips.push(cur);
            cur = g.avg_pool2(cur)?;
        }
        cur = conv(g, cur, true)?;
        cur = conv(g, cur, true)?;
        for skip in skips.into_iter().rev() {
            cur = g.upsample2(cur)?;
            cur = conv(g, cur, true)?;
            cur = g.concat_channels(cur, skip)?;
            cur = conv(g, cur, true)?;
            cur = conv(g, cur, true)?;
        }
        let out_w = *self.vars.last().expect("output layer");
        let y = g.conv2d(cur, out_w, None)?;
        g.reshape(y, &in_shape)
    }
}
