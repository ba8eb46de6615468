//! A small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! A [`Graph`] is recorded first and evaluated later: builder methods such as
//! [`Graph::matmul`] append an operation record and return its [`NodeId`];
//! [`Graph::forward`] evaluates every node in insertion order, optionally with
//! leaf values overridden by bindings; [`Graph::backward`] then propagates a
//! scalar loss back to every trainable leaf.
//!
//! ```
//! use metavrf::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.parameter(Tensor::scalar(3.0));
//! let y = g.mul(x, x);
//! g.eval().unwrap();
//! assert_eq!(g.value(y).unwrap().item(), 9.0);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Bindings, Gradients, Graph, NodeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): expected {expected}, got {actual}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("tensor shape {shape:?} does not match {len} values")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("graph has not been evaluated; call forward first")]
    NotEvaluated,
    #[error("node {node} (solve): matrix is singular to working precision")]
    SingularMatrix { node: usize },
    #[error("binding for node {0} which is not a leaf")]
    BindingToNonLeaf(usize),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("finite-difference step must lie in (0, 1e-2], got {0}")]
    InvalidStep(f64),
}
