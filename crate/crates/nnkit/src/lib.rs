//! Minimal dense-tensor math with reverse-mode differentiation, a small
//! U-Net denoiser, and the Adam optimiser.
//!
//! Everything runs in `f64` on the CPU. Convolutions are lowered to
//! `im2col` + GEMM.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::LinearOp;
pub use tensor::Tensor;
pub use unet::{BoundUNet, CallCounter, Denoiser, IdentityDenoiser, NamedParam, UNet, UNetConfig};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called on a graph that did not record operations")]
    NotRecorded,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
}
