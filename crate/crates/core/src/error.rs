use thiserror::Error;

/// Errors raised by the numeric core and the continual-learning engine.
#[derive(Debug, Error)]
pub enum FrclError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite even after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("quadrature order {0} outside 1..=64")]
    OrderOutOfRange(usize),
    #[error("cached forward pass does not match the inputs or parameters")]
    StaleCache,
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("objective became non-finite at step {step}: {detail}")]
    NonFiniteObjective { step: u64, detail: String },
    #[error("no held-out points remain once the inducing set is removed")]
    EmptyHoldout,
    #[error("prior variance {0:e} too small for a surprise score")]
    DegeneratePrior(f64),
    #[error("both samples have zero variance and different means")]
    ZeroVariance,
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FrclError>;

pub(crate) fn dim_err(op: &'static str, expected: impl ToString, got: impl ToString) -> FrclError {
    FrclError::DimensionMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
