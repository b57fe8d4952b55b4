//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation together with its eagerly computed
//! value. [`Graph::grad`] walks the graph backwards and expresses each
//! vector-Jacobian product with the same primitive operations, appending
//! them to the graph. Gradients are therefore ordinary nodes and can be
//! differentiated again (double backpropagation), which is what lets the
//! attack differentiate through a simulated SGD trajectory.
//!
//! Broadcasting follows NumPy: shapes are aligned on trailing axes and each
//! pair of extents must match or contain a 1. `matmul` is strictly 2-D.
//! `relu` and `abs` have derivative 0 at 0; `max_axis` routes its gradient to
//! the first maximal element.

mod backward;
mod fd;
mod graph;
pub(crate) mod kernels;
mod ops;
mod tensor;

use thiserror::Error;

pub use fd::{finite_difference, finite_difference_at};
pub use graph::{Graph, Var};
pub use tensor::{broadcast_shapes, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this graph")]
    ForeignVar,
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
}

#[cfg(test)]
mod tests;
