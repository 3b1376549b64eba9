use thiserror::Error;

/// Errors raised by tensor arithmetic, the tape, the solvers and the models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: division by a tensor containing zero")]
    DivisionByZero { op: &'static str },
    #[error("{op}: argument out of domain: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value encountered in {what}")]
    NonFinite { what: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("expected a square matrix, got shape {0:?}")]
    NonSquare(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("solver exceeded {max_steps} steps at t = {t}")]
    TooManySteps { max_steps: usize, t: f64 },
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

pub type Result<T> = std::result::Result<T, Error>;
