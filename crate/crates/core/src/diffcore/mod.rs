//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Just enough primitives to train small MLPs and coupling spline flows:
//! elementwise arithmetic with leading-dimension broadcast, dense layers,
//! a handful of activations, reductions, column slicing and concatenation,
//! plus [`Graph::custom`] for fused operations with hand-written gradients.

mod array;
mod gradcheck;
mod graph;

pub use array::RealArray;
pub use gradcheck::{gradcheck, relative_error, GradcheckReport};
pub use graph::{Gradients, Graph, OpKind, Reduce, Var};


pub(crate) use graph::{sigmoid, softplus};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-D array, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("array of shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("slice index {index} out of range for shape {shape:?}")]
    SliceOutOfRange { index: usize, shape: Vec<usize> },
    #[error("concat of zero operands")]
    EmptyConcat,
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite loss while probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
    #[error("loss evaluation failed while probing coordinate {coordinate}: {reason}")]
    ProbeFailed { coordinate: usize, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
