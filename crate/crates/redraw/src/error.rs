use thiserror::Error;

/// Crate-wide error type. Every fallible path returns one of these; panics are
/// reserved for internal indexing bugs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid probability row in {op}: {detail}")]
    BadDistribution { op: &'static str, detail: String },

    #[error("NaN gradient for parameter {name}; update aborted")]
    NanGradient { name: String },

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("parameter {0} already registered")]
    DuplicateParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset schema error: {0}")]
    Schema(String),

    #[error("file format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
