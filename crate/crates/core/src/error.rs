//! Common error type for the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container or file header (bad magic, unsupported version).
    #[error("format error: {0}")]
    Format(String),

    /// Input ended mid-record.
    #[error("truncated input at byte offset {offset}: {what}")]
    Truncated { offset: u64, what: String },

    /// Data violates a declared invariant (geometry, shape, record contents).
    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid configuration (ROI, factor, block count, scheme mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// Fixed-point accumulator left the representable range.
    #[error("accumulator overflow in layer '{layer}'")]
    Overflow { layer: String },

    /// Stream too large to encode (unreachable with in-memory streams).
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Stored checksum does not match the payload.
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    /// Training diverged (non-finite loss).
    #[error("training aborted: {0}")]
    Train(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class: 2 for data/validation problems, 3 for internal ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_)
            | Error::Truncated { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Overflow { .. }
            | Error::Capacity(_)
            | Error::Checksum { .. }
            | Error::Io(_) => 2,
            Error::Train(_) | Error::Json(_) => 3,
        }
    }
}
