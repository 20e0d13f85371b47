use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension { context: String, expected: String, actual: String },

    #[error("{context} needs at least {required} modalities, got {actual}")]
    Arity { context: String, required: usize, actual: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("unsupported task: {0}")]
    UnsupportedTask(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("training diverged at step {step}: non-finite {component}")]
    Divergence { step: usize, component: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Binary file parse failures.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u16, supported: u16 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("trailing data: expected {expected} bytes, found {actual}")]
    Trailing { expected: u64, actual: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid field {field}: {reason}")]
    Field { field: String, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension { context: context.into(), expected: expected.to_string(), actual: actual.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
