//! Crate-wide error type.
//!
//! Variants are grouped by failure class so the CLI can map them onto
//! exit codes (usage / data / numeric).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Geometric precondition violated (degenerate cloud, empty input, ...).
    #[error("geometry: {0}")]
    Geometry(String),

    /// Tensor shape mismatch; names both offending shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numeric failure (non-finite loss, degenerate decomposition, ...).
    #[error("numeric: {0}")]
    Numeric(String),

    /// Dataset validation failure with line number and field path.
    #[error("data: line {line}: {path}: {message}")]
    Data {
        line: usize,
        path: String,
        message: String,
    },

    /// Checkpoint format problems; digest and version mismatches are distinct.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Configuration errors (unknown keys, invalid values, mode mismatches).
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code class used by the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data { .. } | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 2,
            Error::Geometry(_) | Error::Shape(_) | Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
