//! Dense `f64` tensors, a recording graph for reverse-mode gradients over
//! fixed feed-forward networks, and first-order optimizers.

pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
pub mod rng;
mod tensor;

pub use graph::{Graph, NodeId};
pub use ops::{linear_forward, relu, sigmoid, softmax_rows};
pub(crate) use ops::sigmoid_scalar;
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{ParamId, ParamTape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("usage error: {0}")]
    Usage(String),
}
