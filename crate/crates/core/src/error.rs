use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("gamma function argument {arg} is not positive (degrees of freedom too small for this rank?)")]
    Domain { arg: f64 },

    #[error("insufficient data: {found} level rows, need at least {required} for lag {lag}")]
    InsufficientData { found: usize, required: usize, lag: usize },

    #[error("W'W is rank deficient; collinear columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error(
        "cannot normalise cointegration vectors: leading {rank}x{rank} block is singular (try reordering the series)"
    )]
    Normalisation { rank: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("estimator dropped {dropped} of {total} terms as non-finite")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("sweep {iteration} failed at beta = {beta_snapshot}: {source}")]
    Sweep {
        iteration: usize,
        beta_snapshot: String,
        source: Box<Error>,
    },

    #[error("no valid model found after {attempts} attempts; try smaller coefficient ranges")]
    RejectionBudget { attempts: usize },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
