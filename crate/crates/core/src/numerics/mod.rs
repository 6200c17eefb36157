//! Dense tensors, tape-based reverse-mode autodiff, AdamW, the cosine
//! learning-rate schedule and a finite-difference gradient checker.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckConfig, GradCheckReport, Offender};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamWConfig, AdamWState, CosineSchedule, ParamSlot};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?}: every extent must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient in parameter group '{group}' (tensor '{param}')")]
    NanGradient { group: String, param: String },
    #[error("invalid hyperparameter: {what}")]
    InvalidHyper { what: &'static str },
}
