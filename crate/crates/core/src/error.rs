//! Error type shared by every engine module.

use thiserror::Error;

/// Errors produced by the decomposition engine.
///
/// The CLI maps these onto the exit-code contract: configuration and
/// shape problems exit 2, capacity/degree-2 problems exit 3, numeric
/// failures exit 4, everything else exits 1.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Device budget exhausted while blocks in principle could still be
    /// staged one at a time (caller should evict and retry, or re-plan).
    #[error("device budget exhausted: {0}")]
    Capacity(String),

    /// Degree-2 scenario: a single required block does not fit the
    /// device budget, so no batching schedule can make progress.
    #[error("out-of-memory degree 2: {0}")]
    Degree2(String),

    #[error("collective failure: {0}")]
    Collective(String),

    #[error("collective timeout: {0}")]
    Timeout(String),

    #[error("block store: {0}")]
    Store(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
