use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the federated search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shard {0} has no vectors")]
    EmptyShard(u32),

    #[error("duplicate vector id {vector_id} in shard {shard_id}")]
    DuplicateVectorId { shard_id: u32, vector_id: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shard {0} is not available")]
    ShardUnavailable(u32),

    #[error("query id mismatch: {0} vs {1}")]
    QueryMismatch(u64, u64),

    #[error("training split contains a single class")]
    SingleClass,

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("unsupported format or version: {0}")]
    VersionMismatch(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
