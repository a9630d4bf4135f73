//! Merkle DAG nodes and their binary layout.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! 0xD1 | kind u8 | total_size u64 | file_digest [32] | link_count u32 | links...
//! link = child digest [32] | subtree size u64
//! ```
//!
//! Leaves are raw data blocks and are never wrapped in this layout. The kind
//! byte tells a reader how to interpret children: raw leaves or further nodes.
//! `file_digest` is all zeroes on non-root nodes.

use bytes::{BufMut, Bytes, BytesMut};

use crate::cid::ContentId;
use crate::error::CasError;

pub const MAGIC: u8 = 0xD1;
const HEADER_LEN: usize = 1 + 1 + 8 + 32 + 4;
const LINK_LEN: usize = 32 + 8;

/// Largest serialized node accepted by the store.
pub const MAX_NODE_BYTES: usize = 1 << 20;

/// Fan-out of one node. 16,384 links keep a node around 640 KiB.
pub const MAX_LINKS: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum NodeKind {
    /// Children are raw leaf blocks.
    Interior = 0x01,
    /// Children are other interior nodes.
    Upper = 0x02,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub cid: ContentId,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagNode {
    pub kind: NodeKind,
    pub links: Vec<Link>,
    pub total_size: u64,
    pub file_digest: Option<ContentId>,
}

impl DagNode {
    pub fn is_root(&self) -> bool {
        self.file_digest.is_some()
    }

    pub fn encode(&self) -> Bytes {
        let mut buf = BytesMut::with_capacity(HEADER_LEN + LINK_LEN * self.links.len());
        buf.put_u8(MAGIC);
        buf.put_u8(self.kind as u8);
        buf.put_u64(self.total_size);
        match &self.file_digest {
            Some(d) => buf.put_slice(d.as_bytes()),
            None => buf.put_bytes(0, 32),
        }
        buf.put_u32(self.links.len() as u32);
        for link in &self.links {
            buf.put_slice(link.cid.as_bytes());
            buf.put_u64(link.size);
        }
        buf.freeze()
    }

    /// Strict decode: exact length, known kind, link sizes summing to the total.
    pub fn decode(data: &[u8]) -> Result<DagNode, CasError> {
        let bad = |why: &str| CasError::MalformedNode(why.to_string());
        if data.len() < HEADER_LEN {
            return Err(bad("shorter than header"));
        }
        if data[0] != MAGIC {
            return Err(bad("bad magic"));
        }
        let kind = match data[1] {
            0x01 => NodeKind::Interior,
            0x02 => NodeKind::Upper,
            k => return Err(bad(&format!("unknown kind {k:#04x}"))),
        };
        let total_size = u64::from_be_bytes(data[2..10].try_into().unwrap());
        let digest_bytes: [u8; 32] = data[10..42].try_into().unwrap();
        let file_digest = (digest_bytes != [0u8; 32]).then(|| ContentId::from_bytes(digest_bytes));
        let count = u32::from_be_bytes(data[42..46].try_into().unwrap()) as usize;
        if data.len() != HEADER_LEN + count * LINK_LEN {
            return Err(bad("length does not match link count"));
        }
        let mut links = Vec::with_capacity(count);
        let mut sum = 0u64;
        for chunk in data[HEADER_LEN..].chunks_exact(LINK_LEN) {
            let cid = ContentId::from_slice(&chunk[..32]).unwrap();
            let size = u64::from_be_bytes(chunk[32..].try_into().unwrap());
            sum = sum.checked_add(size).ok_or_else(|| bad("size overflow"))?;
            links.push(Link { cid, size });
        }
        if sum != total_size {
            return Err(bad("link sizes do not sum to total size"));
        }
        Ok(DagNode {
            kind,
            links,
            total_size,
            file_digest,
        })
    }

    /// Cheap check used before attempting a full decode.
    pub fn looks_like_node(data: &[u8]) -> bool {
        data.len() >= HEADER_LEN
            && data[0] == MAGIC
            && matches!(data[1], 0x01 | 0x02)
            && (data.len() - HEADER_LEN) % LINK_LEN == 0
    }
}
