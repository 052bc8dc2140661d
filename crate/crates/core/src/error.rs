use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants group into two families the CLI maps onto exit codes:
/// configuration problems (`Config`) and data problems (everything else).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    /// Unrecognized magic bytes or unsupported version.
    #[error("format error: {0}")]
    Format(String),
    /// Structurally valid header but inconsistent payload.
    #[error("corrupt data: {0}")]
    Corruption(String),
    /// A value violates a type invariant (non-finite, out of order, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// Shapes or dimensions of two inputs disagree.
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("insufficient data: {0}")]
    Capacity(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("manifest parse error at line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by user configuration rather than by data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
