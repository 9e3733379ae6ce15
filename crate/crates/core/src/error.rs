//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a numeric operation. `context` names the operation
    /// or layer that detected it.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    /// A loss or intermediate value became NaN/Inf. Carries the name of the
    /// offending term for diagnostics.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown item {0} (index may be stale)")]
    UnknownItem(u64),

    #[error("missing feature '{0}'")]
    MissingFeature(String),

    /// Snapshot and inverted index were built from different publishes.
    #[error("version skew: snapshot={snapshot} index={index}")]
    VersionSkew { snapshot: u64, index: u64 },

    #[error("artifact format error: {0}")]
    Artifact(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Metric is undefined for the given inputs (e.g. all labels identical).
    #[error("degenerate metric input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
