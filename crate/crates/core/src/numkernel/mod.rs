//! Dense `f64` matrices, the forward kernels the detector needs, and a
//! reverse-mode tape over them.

mod matrix;
pub mod ops;
mod tape;

pub use matrix::Matrix;
pub use ops::{conv1d, conv1d_linear, relu, sigmoid, sigmoid_scalar, softmax_rows, weighted_mean};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("tape state error: {0}")]
    State(String),
}
