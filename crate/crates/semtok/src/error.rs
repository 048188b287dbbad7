//! One error type for the whole crate.
//!
//! Variants are grouped by how callers should react: `InvalidConfig` means
//! the request itself was malformed (a CLI maps it to a usage error),
//! `Data` carries a line number pointing at bad input, and `NonFinite`
//! signals numerical failure during training.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/graph construction with incompatible shapes. Names the op and
    /// the offending nodes so broken call sites are easy to locate.
    #[error("shape mismatch in `{op}`: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// `backward` was asked to differentiate something that is not a scalar.
    #[error("backward requires a scalar loss, node {node} has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    /// A knob was set to a value outside its domain (τ ≤ 0, empty batch, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A precondition on runtime inputs failed (wrong vector width, unknown
    /// item id, history token out of vocabulary, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed data file. `line` is 1-based where applicable.
    #[error("{}", located(.line, .message))]
    Data { line: Option<usize>, message: String },

    /// NaN/Inf encountered where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint file rejected (bad magic, truncation, version, mode).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A token table was produced by different codebooks than the ones loaded.
    #[error("codebook checksum mismatch: table has {in_table}, loaded codebooks hash to {actual}")]
    ChecksumMismatch { in_table: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn located(line: &Option<usize>, message: &str) -> String {
    match line {
        Some(n) => format!("line {n}: {message}"),
        None => message.to_string(),
    }
}

impl Error {
    pub fn data(line: usize, message: impl Into<String>) -> Error {
        Error::Data { line: Some(line), message: message.into() }
    }

    pub fn data_noline(message: impl Into<String>) -> Error {
        Error::Data { line: None, message: message.into() }
    }
}
