//! Dense `f64` tensors and a reverse-mode tape covering the operations the
//! model needs: gates, row-shared 1-D convolution, attention plumbing,
//! losses, the reparameterization sample and inverted dropout.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamError};
pub use tape::{Elementwise, Kernel, OpKind, Tape, Var, CE_FLOOR};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{what}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        what: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("{0:?} needs a second operand")]
    MissingOperand(Elementwise),
    #[error("{0:?} takes a single operand")]
    UnexpectedOperand(Elementwise),
    #[error("kernel width {0} is not odd")]
    EvenKernel(usize),
    #[error("kernel expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("softmax over an empty axis")]
    EmptySoftmax,
    #[error("nothing to stack")]
    EmptyStack,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    DropoutRate(f64),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("tape is sealed after backward")]
    TapeSealed,
    #[error("function is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("checked function failed: {0}")]
    Function(String),
}

impl DiffError {
    pub(crate) fn shape(what: &str, left: &[usize], right: &[usize]) -> Self {
        DiffError::Shape {
            what: what.to_string(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
