use std::io::{self, Read};

use super::dag::{DagNode, Link, NodeKind, MAX_LINKS};
use super::store::{Store, MAX_BLOCK_BYTES, MIN_CHUNK_SIZE};
use crate::cid::{ContentHasher, ContentId};
use crate::error::{CasError, Result};

/// What [`chunk_blob`] stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedFile {
    /// Address of the serialized root node.
    pub root: ContentId,
    /// SHA-256 of the whole input, the registry digest.
    pub file_digest: ContentId,
    pub total_size: u64,
    pub leaves: Vec<Link>,
}

/// Splits `data` into `chunk_size` leaves, stores them with their DAG, and
/// registers the root.
pub fn chunk_blob(store: &Store, mut data: impl Read, chunk_size: usize) -> Result<ChunkedFile> {
    if chunk_size < MIN_CHUNK_SIZE || chunk_size > MAX_BLOCK_BYTES {
        return Err(CasError::InvalidArgument(format!(
            "chunk size {chunk_size} outside [{MIN_CHUNK_SIZE}, {MAX_BLOCK_BYTES}]"
        )));
    }
    let mut hasher = ContentHasher::new();
    let mut leaves = Vec::new();
    let mut total = 0u64;
    let mut buf = vec![0u8; chunk_size];
    loop {
        let n = fill(&mut data, &mut buf)?;
        if n == 0 {
            break;
        }
        let piece = &buf[..n];
        hasher.update(piece);
        let cid = ContentId::digest(piece);
        store.insert(cid, piece)?;
        leaves.push(Link {
            cid,
            size: n as u64,
        });
        total += n as u64;
        if n < chunk_size {
            break;
        }
    }
    let file_digest = hasher.finish();
    let root = store_tree(store, &leaves, total, file_digest)?;
    store.register_root(&root)?;
    Ok(ChunkedFile {
        root,
        file_digest,
        total_size: total,
        leaves,
    })
}

/// Convenience wrapper over an in-memory buffer.
pub fn chunk_bytes(store: &Store, data: &[u8], chunk_size: usize) -> Result<ChunkedFile> {
    chunk_blob(store, data, chunk_size)
}

/// Reads until `buf` is full or the source is exhausted.
fn fill(src: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn store_tree(
    store: &Store,
    leaves: &[Link],
    total: u64,
    file_digest: ContentId,
) -> Result<ContentId> {
    if leaves.len() <= MAX_LINKS {
        return store.put_node(&DagNode {
            kind: NodeKind::Interior,
            links: leaves.to_vec(),
            total_size: total,
            file_digest: Some(file_digest),
        });
    }
    let mut children = Vec::new();
    for group in leaves.chunks(MAX_LINKS) {
        let size = group.iter().map(|l| l.size).sum();
        let cid = store.put_node(&DagNode {
            kind: NodeKind::Interior,
            links: group.to_vec(),
            total_size: size,
            file_digest: None,
        })?;
        children.push(Link { cid, size });
    }
    if children.len() > MAX_LINKS {
        return Err(CasError::InvalidArgument(format!(
            "file of {total} bytes needs more than three DAG levels"
        )));
    }
    store.put_node(&DagNode {
        kind: NodeKind::Upper,
        links: children,
        total_size: total,
        file_digest: Some(file_digest),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cas::StoreConfig;

    fn store() -> Store {
        Store::in_memory(StoreConfig::default())
    }

    #[test]
    fn exact_division_gives_four_leaves() {
        let s = store();
        let data = vec![7u8; 1_048_576];
        let f = chunk_bytes(&s, &data, 262_144).unwrap();
        assert_eq!(f.leaves.len(), 4);
        let root = s.get_node(&f.root).unwrap();
        assert_eq!(root.total_size, 1_048_576);
        assert_eq!(root.links.len(), 4);
    }

    #[test]
    fn remainder_leaf() {
        let s = store();
        let data: Vec<u8> = (0..300_000u32).map(|i| i as u8).collect();
        let f = chunk_bytes(&s, &data, 262_144).unwrap();
        let sizes: Vec<u64> = f.leaves.iter().map(|l| l.size).collect();
        assert_eq!(sizes, vec![262_144, 37_856]);
    }

    #[test]
    fn empty_input_has_rootless_links() {
        let s = store();
        let f = chunk_bytes(&s, b"", 262_144).unwrap();
        let root = s.get_node(&f.root).unwrap();
        assert!(root.links.is_empty());
        assert_eq!(
            root.file_digest.unwrap().to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(s.assemble(&f.root).unwrap(), b"");
    }

    #[test]
    fn rejects_small_chunk_size() {
        let s = store();
        assert!(matches!(
            chunk_bytes(&s, b"abc", 0),
            Err(CasError::InvalidArgument(_))
        ));
        assert!(chunk_bytes(&s, b"abc", 4095).is_err());
    }

    #[test]
    fn third_level_beyond_max_links() {
        let s = store();
        // Repeated content keeps the test small: every leaf dedups to one block.
        let data = vec![0u8; (MAX_LINKS + 3) * 4096];
        let f = chunk_bytes(&s, &data, 4096).unwrap();
        let root = s.get_node(&f.root).unwrap();
        assert_eq!(root.kind, NodeKind::Upper);
        assert_eq!(root.links.len(), 2);
        assert_eq!(s.assemble(&f.root).unwrap(), data);
        assert_eq!(s.walk(&f.root).unwrap().leaves.len(), MAX_LINKS + 3);
    }
}
