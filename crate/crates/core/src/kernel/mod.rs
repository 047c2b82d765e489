//! Minimal differentiable-computation core: dense tensors, a recording
//! tape with exact reverse-mode gradients, and momentum SGD.

mod sgd;
mod tape;
mod tensor;

pub use sgd::{Parameter, Sgd};
pub use tape::{euclidean, sigmoid, softmax_rows, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward called on a tape with no recorded forward pass")]
    EmptyTape,
}

impl KernelError {
    pub(crate) fn mismatch(op: &str, a: [usize; 2], b: [usize; 2]) -> Self {
        KernelError::Shape(format!(
            "{op}: incompatible shapes {}x{} and {}x{}",
            a[0], a[1], b[0], b[1]
        ))
    }
}
