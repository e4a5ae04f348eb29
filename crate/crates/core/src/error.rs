use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("non-finite component at index {index}")]
    NonFinite { index: usize },

    #[error("cannot pick {k} centroids from {rows} rows")]
    InfeasibleK { k: usize, rows: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("cluster store is already initialized")]
    AlreadyInitialized,

    #[error("cluster store is not initialized")]
    NotInitialized,

    #[error("empty selection mask")]
    EmptySelection,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("token {token} is missing from the layout")]
    LayoutInconsistency { token: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("trace format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("config {path}:{line}: {reason}")]
    Config {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
