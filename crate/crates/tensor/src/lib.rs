//! Minimal dense tensor and reverse-mode autodiff engine for small
//! convolutional networks on the CPU.
//!
//! Results are bitwise deterministic: every reduction runs in a fixed order
//! on a single thread.

mod conv;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
