use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration failed validation before any work started.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A training step produced a NaN or infinite value.
    #[error("non-finite {what} in parameter block `{block}`")]
    NonFinite { what: &'static str, block: String },

    /// A feature vector does not match the regressor's declared schema.
    #[error("feature schema mismatch: {0}")]
    Schema(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stream is not in click-time order at example {example_id}")]
    OutOfOrder { example_id: u64 },

    #[error("reports were produced from different configurations ({0} vs {1})")]
    DigestMismatch(String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
