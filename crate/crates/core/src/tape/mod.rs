//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! The graph is rebuilt for every forward pass. Parameters live outside the
//! graph in a [`ParamStore`]; [`Graph::param`] copies them in and
//! [`ParamStore::accumulate`] collects their gradients after
//! [`Graph::backward`].

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{Adam, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: input {value} at flat index {index} is outside the domain (> 0)")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("window {window} with dilation {dilation} does not fit a sequence of length {len}")]
    EmptyWindow {
        window: usize,
        dilation: usize,
        len: usize,
    },
    #[error("backward needs a one-element root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

pub type Result<T, E = TapeError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests;
