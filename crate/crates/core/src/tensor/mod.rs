//! Dense tensors and a tape-based reverse-mode differentiator.

mod array;
pub mod gradcheck;
mod real;
mod tape;

pub use array::{Parameter, Tensor};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: value {value} outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: NaN input")]
    NonFinite { op: &'static str },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for extent {len}")]
    Index { index: usize, len: usize },
    #[error("slice {start}..{} exceeds extent {extent}", start + len)]
    Slice {
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
