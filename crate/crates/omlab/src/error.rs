use thiserror::Error;

/// Errors shared by all modules of the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input for `{key}`: {reason}")]
    InvalidInput { key: String, reason: String },

    #[error("grid would hold {points} points, exceeding the cap of {cap}")]
    PointCapExceeded { points: u128, cap: u64 },

    #[error("expression error: {0}")]
    Expr(String),

    #[error("csv ingestion error: {0}")]
    Csv(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point {0:?} lies outside the space domain")]
    OutOfDomain(Vec<f64>),

    #[error("operation `{op}` is not supported on a {kind} space")]
    UnsupportedSpace { op: String, kind: String },

    #[error("modulus scope {scope} is too small; need at least {needed}")]
    ScopeTooSmall { scope: f64, needed: f64 },

    #[error("fewer than 2 distinct radius bins populated in modulus estimate")]
    DegenerateModulus,

    #[error("schedule infeasible: {0}")]
    ScheduleInfeasible(String),

    #[error("Monte Carlo underflow at radius {radius}: 0 of {samples} samples in ball (upper bound {upper_bound:.3e})")]
    Underflow {
        radius: f64,
        samples: u64,
        upper_bound: f64,
    },

    #[error("non-positive mass in ratio at radius {0}")]
    NonPositiveMass(f64),

    #[error("precondition not met: {0}")]
    PreconditionFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}
