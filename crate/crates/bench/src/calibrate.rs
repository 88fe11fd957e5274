//! Detector calibration from the flat and dark stacks.

use serde::{Deserialize, Serialize};
use ssct_core::calibration::{
    estimate_blur_sigma, estimate_gain, estimate_gain_corrected, estimate_noise_std, CalibrationInput,
};
use ssct_core::simulation::{blur_energy, gaussian_kernel, preprocess, BlurredGaussianNoiseModel, PoissonGaussianParams};

use crate::config::{ExperimentConfig, Layout, Split, Variant};
use crate::dataset::{load_flat_dark, load_stack, read_tensor};
use crate::{read_text, write_text, BenchError};

/// Estimated detector parameters for one blur setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Width of the fitted Gaussian blur, in detector pixels.
    pub blur_sigma: f64,
    /// Counts per photon, corrected for dark variance and blur.
    pub gain: f64,
    /// Plain variance-to-mean ratio of the flats.
    pub gain_ratio: f64,
    /// Read-noise variance measured on the darks.
    pub read_variance: f64,
    /// Std of deconvolved, pre-processed flat noise.
    pub noise_std: f64,
    /// Root-mean-square std of pre-processed noise over the training
    /// sinograms, predicted from gain, blur and read noise.
    pub sinogram_noise_std: f64,
}

impl Calibration {
    pub fn kernel(&self) -> Vec<f64> {
        gaussian_kernel(self.blur_sigma)
    }

    /// Correlated Gaussian model of pre-processed noise.
    pub fn bg_model(&self) -> Result<BlurredGaussianNoiseModel, BenchError> {
        Ok(BlurredGaussianNoiseModel::new(self.sinogram_noise_std, self.kernel())?)
    }

    /// Poisson–Gaussian model of raw noise.
    pub fn pg_model(&self) -> Result<PoissonGaussianParams, BenchError> {
        Ok(PoissonGaussianParams::new(self.gain, self.read_variance.sqrt())?)
    }

    pub fn load(layout: &Layout, blur: bool) -> Result<Self, BenchError> {
        let text = read_text(&layout.calibration(blur), "calibration (run `ssct calibrate`)")?;
        toml::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))
    }
}

/// Calibrates one blur setting from its stacks and training data.
pub fn calibrate_setting(layout: &Layout, blur: bool) -> Result<Calibration, BenchError> {
    let flats = CalibrationInput::new(load_stack(&layout.flats(blur))?)?;
    let darks = CalibrationInput::new(load_stack(&layout.darks(blur))?)?;
    let blur_sigma = estimate_blur_sigma(&flats)?;
    let kernel = gaussian_kernel(blur_sigma);
    let gain = estimate_gain_corrected(&flats, &darks, &kernel)?;
    let gain_ratio = estimate_gain(&flats)?;
    // Read noise enters after the blur, so darks are not deconvolved.
    let read_variance = estimate_noise_std(&darks, &[1.0])?.powi(2);

    let variant = if blur { Variant::CompleteBlur } else { Variant::Complete };
    let fd = load_flat_dark(layout, variant)?;
    let pre: Vec<_> = flats
        .frames()
        .iter()
        .map(|f| preprocess(f, &fd))
        .collect::<Result<_, _>>()?;
    let noise_std = estimate_noise_std(&CalibrationInput::new(pre)?, &kernel)?;

    let energy = blur_energy(&kernel, fd.dark().len());
    let raw = read_tensor(&layout.raw(variant, Split::Train), "raw sinograms")?.into_array3()?;
    let dark = fd.dark();
    let mut acc = 0.0;
    for lane in raw.lanes(ndarray::Axis(2)) {
        for ((y, q), e) in lane.iter().zip(dark).zip(&energy) {
            // At least one photon's worth of signal.
            let signal = (y - q).max(gain);
            acc += (gain * e * signal + read_variance) / (signal * signal);
        }
    }
    let sinogram_noise_std = (acc / raw.len() as f64).sqrt();
    Ok(Calibration {
        blur_sigma,
        gain,
        gain_ratio,
        read_variance,
        noise_std,
        sinogram_noise_std,
    })
}

/// Calibrates both blur settings and writes one TOML file per setting.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<Vec<Calibration>, BenchError> {
    let layout = cfg.layout();
    let mut out = Vec::new();
    for blur in [false, true] {
        let c = calibrate_setting(&layout, blur)?;
        write_text(
            &layout.calibration(blur),
            &toml::to_string(&c).expect("calibration serialises"),
        )?;
        out.push(c);
    }
    Ok(out)
}
