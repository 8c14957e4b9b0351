//! Dense tensors, tape-based reverse-mode autodiff, and Adam.

mod adam;
mod tape;
mod tensor;

pub use adam::Adam;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite gradient at optimizer step {step}")]
    NonFinite { step: u64 },
}
