//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the surface that raises them so callers (notably
/// the CLI) can map them onto coarse exit categories.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors had incompatible shapes for an operation.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor invariant was violated (length/shape disagreement, bad rank).
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    /// A primitive produced a NaN or infinite value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A normalization row had no admissible entries (fully masked softmax,
    /// or an all-zero row under L1 normalization).
    #[error("degenerate row {row} in {op}: {detail}")]
    DegenerateRow {
        op: &'static str,
        row: usize,
        detail: String,
    },

    /// A node id did not belong to the tape, or backward was misused.
    #[error("tape error: {0}")]
    Tape(String),

    /// A prompt-template layout string failed to parse.
    #[error("layout error at atom {position}: {message}")]
    Layout { position: usize, message: String },

    /// A templated input cannot fit the requested maximum length.
    #[error("length error: {0}")]
    Length(String),

    /// Malformed or inconsistent input data.
    #[error("data error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, message: String },

    /// A label hierarchy failed validation.
    #[error("hierarchy error: {0}")]
    Hierarchy(String),

    /// A checkpoint file was missing, corrupt, or mismatched.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A run-configuration key was unknown or had an invalid value.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn data(message: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            message: message.into(),
        }
    }

    pub fn data_at(line: usize, message: impl Into<String>) -> Self {
        Error::Data {
            line: Some(line),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
