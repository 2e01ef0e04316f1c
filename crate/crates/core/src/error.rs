use thiserror::Error;

use crate::harness::RunReport;
use crate::regression::RegressionCoeffs;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    /// The regressor's variance is too small for a meaningful slope.
    /// `fallback` holds `(mean(target), 1)` for callers that opt in.
    #[error("degenerate source variance {variance:e} (fallback {fallback:?})")]
    DegenerateVariance {
        variance: f64,
        fallback: RegressionCoeffs,
    },

    #[error("need at least {min} elements, got {len}")]
    TooFewElements { min: usize, len: usize },

    #[error("group size {k} does not divide {positions} positions per channel")]
    IndivisibleGroupSize { k: usize, positions: usize },

    #[error("group size must be at least 2, got {0}")]
    GroupSizeTooSmall(usize),

    #[error("iteration {iter} outside [0, {total}]")]
    IterOutOfRange { iter: usize, total: usize },

    #[error("timestep {t} outside [1, {steps}]")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("noise must be zero at the final step t = 1")]
    NonzeroFinalNoise,

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("negative input {0} where a nonnegative value is required")]
    NegativeInput(f64),

    /// Training produced a non-finite loss. `partial` carries whatever was
    /// logged before the failing step.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        partial: Option<Box<RunReport>>,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
