use std::cmp::Ordering;
use std::fmt;

use crate::cid::ContentId;

/// SHA-256 of a node's listen address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerId([u8; 32]);

impl PeerId {
    pub fn from_addr(addr: &str) -> Self {
        PeerId(*ContentId::digest(addr.as_bytes()).as_bytes())
    }

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        PeerId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        ContentId::from_hex(s).ok().map(|c| PeerId(*c.as_bytes()))
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short())
    }
}

impl fmt::Debug for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PeerId({})", self.short())
    }
}

pub type Distance = [u8; 32];

pub fn xor(a: &[u8; 32], b: &[u8; 32]) -> Distance {
    let mut d = [0u8; 32];
    for i in 0..32 {
        d[i] = a[i] ^ b[i];
    }
    d
}

/// Orders `a` and `b` by XOR distance to `target`.
pub fn cmp_distance(target: &[u8; 32], a: &[u8; 32], b: &[u8; 32]) -> Ordering {
    xor(target, a).cmp(&xor(target, b))
}

/// Index of the k-bucket holding `other` relative to `me`: leading zero
/// bits of the XOR distance, `None` for the node itself.
pub fn bucket_index(me: &[u8; 32], other: &[u8; 32]) -> Option<usize> {
    let d = xor(me, other);
    let mut zeros = 0;
    for byte in d {
        if byte == 0 {
            zeros += 8;
        } else {
            zeros += byte.leading_zeros() as usize;
            return Some(zeros);
        }
    }
    None
}

/// A peer's identity and where to reach it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PeerInfo {
    pub id: PeerId,
    pub addr: String,
}

impl PeerInfo {
    pub fn new(addr: impl Into<String>) -> Self {
        let addr = addr.into();
        PeerInfo {
            id: PeerId::from_addr(&addr),
            addr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_is_stable_hash_of_address() {
        let a = PeerId::from_addr("10.0.0.1:4001");
        assert_eq!(a, PeerId::from_addr("10.0.0.1:4001"));
        assert_ne!(a, PeerId::from_addr("10.0.0.2:4001"));
        assert_eq!(
            a.as_bytes(),
            ContentId::digest(b"10.0.0.1:4001").as_bytes()
        );
    }

    #[test]
    fn bucket_index_counts_shared_prefix() {
        let me = [0u8; 32];
        let mut other = [0u8; 32];
        other[0] = 0x80;
        assert_eq!(bucket_index(&me, &other), Some(0));
        other[0] = 0x01;
        assert_eq!(bucket_index(&me, &other), Some(7));
        other[0] = 0;
        other[31] = 1;
        assert_eq!(bucket_index(&me, &other), Some(255));
        assert_eq!(bucket_index(&me, &me), None);
    }
}
