//! Minimal reverse-mode differentiation over dense NHWC tensors.
//!
//! The layer set is exactly what the generator, discriminator and losses
//! use: convolution and its transpose, batch norm, activations, dropout,
//! channel concatenation, fully connected layers, FFT magnitude and a few
//! reductions.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod shape;
mod store;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use graph::{BatchNormParams, Grads, Graph, Mode, Ops, Var};
pub use kernels::Padding;
pub use shape::ShapeTracer;
pub use store::{Param, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
