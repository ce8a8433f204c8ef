//! Crate-wide error type.

use thiserror::Error;

/// Coarse classification used by callers that map errors to process exit
/// codes. Everything that is not configuration or data is numeric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or arguments supplied by the caller.
    Config,
    /// Malformed or unusable input data.
    Data,
    /// Numerical failure during computation.
    Numeric,
}

#[derive(Debug, Error)]
pub enum SdrError {
    /// Tensor arguments do not have the shapes an operation requires.
    #[error("{context}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A non-finite value appeared at the named graph node or computation.
    #[error("non-finite value in {node}")]
    NonFinite { node: String },

    /// The sparse measurement set is empty where at least one point is needed.
    #[error("sparse depth contains no measurements")]
    EmptySparse,

    /// No valid pixels were available for a metric or loss.
    #[error("no valid pixels for evaluation")]
    NoValidPixels,

    /// Two runs that must agree bit for bit disagreed.
    #[error("non-deterministic result: {0}")]
    NonDeterministic(String),

    /// Training diverged; state refers to the last step attempted.
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    /// A text or binary input failed to parse.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SdrError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            SdrError::Config(_) | SdrError::ShapeMismatch { .. } => ErrorKind::Config,
            SdrError::EmptySparse
            | SdrError::NoValidPixels
            | SdrError::Parse { .. }
            | SdrError::Io(_) => ErrorKind::Data,
            SdrError::NonFinite { .. }
            | SdrError::NonDeterministic(_)
            | SdrError::Diverged { .. } => ErrorKind::Numeric,
        }
    }
}
