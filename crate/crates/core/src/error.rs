use thiserror::Error;

use crate::cid::ContentId;

#[derive(Debug, Error)]
pub enum CasError {
    #[error("block {0} not found")]
    NotFound(ContentId),
    #[error("block {0} failed verification and was quarantined")]
    Integrity(ContentId),
    #[error("dag is incomplete, {} block(s) missing", .0.len())]
    MissingChildren(Vec<ContentId>),
    #[error("assembled digest {actual} does not match expected {expected}")]
    DigestMismatch {
        expected: ContentId,
        actual: ContentId,
    },
    #[error("store capacity exhausted: need {needed} bytes, {available} reclaimable")]
    Capacity { needed: u64, available: u64 },
    #[error("block of {len} bytes exceeds limit of {limit}")]
    BlockTooLarge { len: usize, limit: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed dag node: {0}")]
    MalformedNode(String),
    #[error("storage i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CasError> = std::result::Result<T, E>;
