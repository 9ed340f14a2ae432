use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("data length {actual} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite entry {value} at flat index {index}")]
    NonFiniteEntry { index: usize, value: f64 },
    #[error("axis mismatch: {0}")]
    AxisMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("matrix is singular (reciprocal condition {rcond:e})")]
    Singular { rcond: f64 },
    #[error("non-finite result: {0}")]
    NonFiniteResult(String),
    #[error("derivative routes disagree: {0}")]
    InconsistentDerivatives(String),
    #[error("unknown spec: {0}")]
    UnknownSpec(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("not a good position: {0}")]
    NotGoodPosition(String),
    #[error("transformation is not an involution (residual {residual:e})")]
    NotInvolution { residual: f64 },
    #[error("no conserved charge: {0}")]
    NotConservative(String),
    #[error("degenerate loss derivative: {0}")]
    DegenerateLoss(String),
    #[error("point is not in the fixed-point set (residual {residual:e})")]
    NotFixedPoint { residual: f64 },
    #[error("model is not a factored last-layer model: {0}")]
    NotFactoredModel(String),
    #[error("not converged: gradient norm {grad_norm:e} exceeds {threshold:e}")]
    NotConverged { grad_norm: f64, threshold: f64 },
    #[error("integration step failed at t={time}: {reason}")]
    StepFailure { time: f64, reason: String },
    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),
    #[error("ensemble of {actual} trajectories is below the minimum {required}")]
    InsufficientEnsemble { actual: usize, required: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
