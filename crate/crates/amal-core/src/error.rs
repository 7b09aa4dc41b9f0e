//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Cholesky failed even after jitter escalation; the matrix is too
    /// ill-conditioned to treat as positive definite.
    #[error("cholesky factorization failed up to jitter {max_jitter:e} ({context})")]
    FactorizationFailure { max_jitter: f64, context: String },

    #[error("dataset is empty but the operation requires observations")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid configuration: {field}: {message}")]
    ConfigInvalid { field: String, message: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: file has {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("pool exhausted: no unlabeled candidates remain")]
    PoolExhausted,

    #[error("non-finite loss in experiment {experiment}: {detail}")]
    NonFiniteLoss { experiment: usize, detail: String },

    #[error("malformed row at line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("missing column {column:?} in table header")]
    MissingColumn { column: String },

    #[error("all {restarts} optimizer restarts failed: {detail}")]
    AllRestartsFailed { restarts: usize, detail: String },

    #[error("wilcoxon test undefined: all paired differences are zero")]
    AllZeroDifferences,

    #[error("wilcoxon test requires 5..=20 paired samples, got {n}")]
    BadSampleCount { n: usize },

    #[error(
        "significance testing requires a random baseline for every problem, \
         but none was found among {found:?}"
    )]
    MissingRandomBaseline { found: Vec<String> },

    #[error("seed count mismatch: method {method} has {got} traces, expected {expected}")]
    SeedCountMismatch {
        method: String,
        got: usize,
        expected: usize,
    },

    #[error("trace file error: {0}")]
    TraceFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical machinery (exit code 3 in the CLI),
    /// as opposed to configuration or IO problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FactorizationFailure { .. }
                | Error::NonFiniteLoss { .. }
                | Error::AllRestartsFailed { .. }
        )
    }
}
