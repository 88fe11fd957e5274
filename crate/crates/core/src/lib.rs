//! Building blocks for benchmarking self-supervised CT reconstruction:
//! a parallel-beam projector and FBP, an X-ray measurement simulator with
//! scintillator blur, calibration of its parameters, the supervised and
//! self-supervised training losses, and image quality metrics.

pub mod calibration;
pub mod losses;
pub mod metrics;
pub mod rotation;
pub mod simulation;
pub mod tomo;

use ndarray::Array2;
use ssct_nnkit::NnError;

/// Attenuation map on a `rows × cols` pixel grid.
pub type Image = Array2<f64>;
/// Pre-processed line integrals, `angles × detector`.
pub type Sinogram = Array2<f64>;
/// Raw detector counts, `angles × detector`.
pub type RawSinogram = Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid projection subset: {0}")]
    Subset(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("foam generation placed only {placed} of {requested} bubbles")]
    FoamPlacement { placed: usize, requested: usize },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("loss: {0}")]
    Loss(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}
