//! Experiment configuration, read from TOML with CLI overrides, and the
//! on-disk layout derived from it.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use ssct_core::losses::{LossSpec, Method};
use ssct_core::simulation::{FoamSpec, PhysicsParams};
use ssct_core::tomo::{restrict, FilterWindow, Geometry, ProjectionSubset};
use ssct_nnkit::{AdamConfig, UNetConfig};

use crate::{read_text, BenchError};

/// One of the four scan/detector combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Complete,
    CompleteBlur,
    Limited,
    LimitedBlur,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Complete,
        Variant::CompleteBlur,
        Variant::Limited,
        Variant::LimitedBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Complete => "complete",
            Variant::CompleteBlur => "complete-blur",
            Variant::Limited => "limited",
            Variant::LimitedBlur => "limited-blur",
        }
    }

    pub fn blur(self) -> bool {
        matches!(self, Variant::CompleteBlur | Variant::LimitedBlur)
    }

    pub fn limited(self) -> bool {
        matches!(self, Variant::Limited | Variant::LimitedBlur)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoamConfig {
    pub disk_radius_frac: f64,
    pub bubbles: usize,
    pub bubble_radius_min: f64,
    pub bubble_radius_max: f64,
    pub attenuation: f64,
}

impl Default for FoamConfig {
    fn default() -> Self {
        let d = FoamSpec::default();
        Self {
            disk_radius_frac: d.disk_radius_frac,
            bubbles: d.bubbles,
            bubble_radius_min: d.bubble_radius_min,
            bubble_radius_max: d.bubble_radius_max,
            attenuation: d.attenuation,
        }
    }
}

/// Detector physics; blur is switched per variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub photon_count: f64,
    pub dark_mean: f64,
    pub dark_variance: f64,
    pub gain: f64,
    pub blur_sigma: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        let d = PhysicsParams::default();
        Self {
            photon_count: d.photon_count,
            dark_mean: d.dark_mean,
            dark_variance: d.dark_variance,
            gain: d.gain,
            blur_sigma: d.blur_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Image side in pixels.
    pub size: usize,
    /// Projections over 180° in the complete scan.
    pub angles: usize,
    /// Leading projections kept in the limited-angle scan.
    pub limited_angles: usize,
    /// Detector pixels; `ceil(1.5 · size)` when absent.
    pub detector: Option<usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Flat and dark frames per calibration stack.
    pub calibration_frames: usize,
    pub filter: FilterWindow,
    pub foam: FoamConfig,
    pub physics: PhysicsConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 64,
            angles: 128,
            limited_angles: 64,
            detector: None,
            train: 16,
            val: 4,
            test: 4,
            calibration_frames: 1024,
            filter: FilterWindow::None,
            foam: FoamConfig::default(),
            physics: PhysicsConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn n_det(&self) -> usize {
        self.detector
            .unwrap_or_else(|| (1.5 * self.size as f64).ceil() as usize)
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Complete-scan geometry: the detector spans the image diagonal and
    /// the image covers `[-1, 1]²`.
    pub fn full_geometry(&self) -> Result<Geometry, BenchError> {
        let n_det = self.n_det();
        let spacing = self.size as f64 * 2f64.sqrt() / n_det as f64;
        Ok(Geometry::parallel(
            self.angles,
            PI,
            n_det,
            spacing,
            self.size,
            self.size,
            2.0 / self.size as f64,
        )?)
    }

    pub fn geometry(&self, variant: Variant) -> Result<Geometry, BenchError> {
        let full = self.full_geometry()?;
        if variant.limited() {
            Ok(restrict(&full, &self.limited_subset())?)
        } else {
            Ok(full)
        }
    }

    pub fn limited_subset(&self) -> ProjectionSubset {
        ProjectionSubset::leading(self.limited_angles, self.angles)
    }

    pub fn physics(&self, blur: bool) -> PhysicsParams {
        let p = &self.physics;
        PhysicsParams {
            photon_count: p.photon_count,
            dark_mean: p.dark_mean,
            dark_variance: p.dark_variance,
            gain: p.gain,
            blur_sigma: p.blur_sigma,
            blur,
        }
    }

    pub fn foam(&self, seed: u64) -> FoamSpec {
        let f = &self.foam;
        FoamSpec {
            rows: self.size,
            cols: self.size,
            disk_radius_frac: f.disk_radius_frac,
            bubbles: f.bubbles,
            bubble_radius_min: f.bubble_radius_min,
            bubble_radius_max: f.bubble_radius_max,
            attenuation: f.attenuation,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let d = UNetConfig::default();
        Self {
            depth: d.depth,
            base_channels: d.base_channels,
            leaky_slope: d.leaky_slope,
        }
    }
}

impl NetworkConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            leaky_slope: self.leaky_slope,
            linear: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 4,
            max_epochs: 200,
            patience: 50,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }
}

/// Which variant and split a command works on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Split scored by `evaluate`.
    pub split: Split,
    /// Evaluate plain FBP instead of a trained network.
    pub baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2],
        }
    }
}

fn default_loss() -> LossSpec {
    LossSpec::new(Method::Sup)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Root of every artefact; relative paths resolve against the config
    /// file's directory.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default = "default_loss")]
    pub loss: LossSpec,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            output_dir: output_dir.into(),
            dataset: DatasetConfig::default(),
            run: RunConfig::default(),
            loss: default_loss(),
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let cfg: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, resolving a relative `output_dir` against its folder.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let mut cfg = Self::from_toml(&read_text(path, "config file")?)?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let d = &self.dataset;
        let bad = |m: String| Err(BenchError::Config(m));
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return bad("train, val and test splits must all be non-empty".into());
        }
        if d.calibration_frames < 2 {
            return bad("calibration needs at least two frames".into());
        }
        if d.angles < 4 || d.limited_angles < 4 || d.limited_angles > d.angles {
            return bad(format!(
                "need 4 <= limited_angles ({}) <= angles ({})",
                d.limited_angles, d.angles
            ));
        }
        let n = &self.network;
        if n.depth == 0 || n.base_channels == 0 {
            return bad("network depth and width must be positive".into());
        }
        if !d.size.is_multiple_of(1 << n.depth) {
            return bad(format!(
                "image size {} is not divisible by 2^depth = {}",
                d.size,
                1 << n.depth
            ));
        }
        let o = &self.optimizer;
        if o.batch_size == 0 || o.max_epochs == 0 {
            return bad("batch size and max epochs must be positive".into());
        }
        if o.patience > o.max_epochs {
            return bad(format!(
                "patience {} exceeds max epochs {}",
                o.patience, o.max_epochs
            ));
        }
        if !(o.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        self.loss.validate()?;
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return bad("sweep lambdas must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output_dir.clone(),
        }
    }
}

/// Paths of every artefact under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

fn blur_tag(blur: bool) -> &'static str {
    if blur {
        "blur"
    } else {
        "noblur"
    }
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn phantoms(&self, split: Split) -> PathBuf {
        self.data_dir().join("phantoms").join(format!("{split}.ssct"))
    }

    pub fn variant_dir(&self, variant: Variant) -> PathBuf {
        self.data_dir().join(variant.name())
    }

    pub fn raw(&self, variant: Variant, split: Split) -> PathBuf {
        self.variant_dir(variant).join(format!("{split}_raw.ssct"))
    }

    pub fn sino(&self, variant: Variant, split: Split) -> PathBuf {
        self.variant_dir(variant).join(format!("{split}_sino.ssct"))
    }

    pub fn flat_dark(&self, variant: Variant) -> PathBuf {
        self.variant_dir(variant).join("flat_dark.ssct")
    }

    pub fn stack_dir(&self, blur: bool) -> PathBuf {
        self.data_dir().join("calibration").join(blur_tag(blur))
    }

    pub fn flats(&self, blur: bool) -> PathBuf {
        self.stack_dir(blur).join("flats.ssct")
    }

    pub fn darks(&self, blur: bool) -> PathBuf {
        self.stack_dir(blur).join("darks.ssct")
    }

    pub fn calibration(&self, blur: bool) -> PathBuf {
        self.root.join("calibration").join(format!("{}.toml", blur_tag(blur)))
    }

    pub fn run_dir(&self, variant: Variant, run: &str) -> PathBuf {
        self.root.join("runs").join(variant.name()).join(run)
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn metrics(&self, variant: Variant, label: &str, split: Split) -> PathBuf {
        self.results_dir()
            .join(variant.name())
            .join(format!("{label}_{split}.csv"))
    }

    pub fn sweep_summary(&self, variant: Variant, method: Method) -> PathBuf {
        self.root
            .join("sweeps")
            .join(variant.name())
            .join(format!("{method}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Name of a training run: the method, plus λ for weighted methods.
pub fn run_name(spec: &LossSpec) -> String {
    if spec.method.uses_lambda() {
        format!("{}_lambda={}", spec.method, crate::fmt_f64(spec.lambda))
    } else {
        spec.method.to_string()
    }
}
