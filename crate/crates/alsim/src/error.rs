//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: &'static str },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("config key `{key}`: {msg}")]
    ConfigValue { key: String, msg: String },

    #[error("{file}: schema mismatch: {msg}")]
    SchemaMismatch { file: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pool invariant breached: {0}")]
    PoolInvariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;
