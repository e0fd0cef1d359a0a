//! Dense tensors, a differentiation tape, and a finite-difference gradient
//! oracle.

mod gradcheck;
pub mod kernels;
mod plan;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use plan::{AttentionMode, AttentionPlan};
pub use tape::{Gradients, PrimitiveKind, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("attention row {row} has no visible key")]
    FullyMaskedRow { row: usize },
    #[error("invalid attention plan: {0}")]
    InvalidPlan(String),
    #[error("loss does not depend on any tracked node")]
    Detached,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("finite-difference step {0} outside [1e-7, 1e-4]")]
    BadStep(f64),
    #[error("finite difference at parameter {param}, coordinate {index} is not finite")]
    NonFiniteDifference { param: usize, index: usize },
}
