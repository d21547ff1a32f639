//! Minimal reverse-mode differentiable array engine.
//!
//! A [`Graph`] is built once per batch configuration: leaves are declared
//! with fixed shapes, ops are appended in topological order, and shapes are
//! checked at build time. Each training step then binds leaf values with
//! [`Bindings`], runs [`Graph::forward`] to cache every intermediate value,
//! and [`Graph::backward`] to accumulate gradients of a scalar root into
//! every parameter leaf.
//!
//! The op set is exactly what the pose networks need: affine, strided 2D
//! convolution, relu, elementwise add/sub/mul, square, sum, mean, reshape,
//! and concatenation. Everything is `f64`; execution is single-threaded and
//! bitwise deterministic.

mod finite_diff;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use finite_diff::{finite_diff_check, FiniteDiffReport};
pub use graph::{Bindings, Evaluation, Gradients, Graph, NodeId};
pub use optim::{adam_step, AdamHyper, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("leaf '{0}' is not bound")]
    UnboundLeaf(String),
    #[error("leaf name '{0}' declared twice")]
    DuplicateLeaf(String),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("no gradient supplied for parameter '{0}'")]
    MissingGradient(String),
    #[error("tensor data length {got} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, got: usize },
    #[error("finite-difference step must lie in (0, 1e-2], got {0}")]
    BadEpsilon(f64),
    #[error("invalid node id")]
    BadNodeId,
}
