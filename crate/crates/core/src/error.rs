use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFinite,

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix not symmetric (|m[{row}][{col}] - m[{col}][{row}]| = {gap:e})")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("matrix not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("conditioning on zero-probability target (t = {0})")]
    ZeroProbabilityTarget(usize),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("alphabet too large: {0}")]
    AlphabetTooLarge(String),

    #[error("empty input")]
    EmptyInput,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("class {0} is absent from the training set")]
    MissingClass(usize),

    #[error("target kind {found} does not match configured variant {expected}")]
    TargetMismatch { expected: String, found: String },

    #[error("training diverged in phase {phase} at epoch {epoch}: {detail}")]
    Diverged {
        phase: u8,
        epoch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
