//! Local content-addressed storage: chunking, Merkle DAGs, verification and
//! pin-aware eviction.

mod backend;
mod chunk;
mod dag;
mod store;

pub use backend::{Backend, DiskBackend, MemoryBackend};
pub use chunk::{chunk_blob, chunk_bytes, ChunkedFile};
pub use dag::{DagNode, Link, NodeKind, MAGIC, MAX_LINKS, MAX_NODE_BYTES};
pub use store::{
    DagWalk, Store, StoreConfig, StoreStats, VerifiedBlock, DEFAULT_CHUNK_SIZE, MAX_BLOCK_BYTES,
    MIN_CHUNK_SIZE,
};
