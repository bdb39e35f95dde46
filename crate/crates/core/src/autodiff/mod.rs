//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node, so node order is a
//! topological order and [`Graph::backward`] walks it in reverse. Graphs are
//! rebuilt for every training step.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionLayout, Graph, Var, RMS_NORM_EPS, ROPE_BASE};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: index {index} out of range (< {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
}
