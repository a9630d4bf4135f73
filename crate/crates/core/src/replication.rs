//! Site-wide pinset and tag table.
//!
//! The state is a join-semilattice: pins form a grow-only set and tags are
//! last-writer-wins registers ordered by `(lamport, writer)`. Nodes converge
//! by periodically pushing their full state to a random member.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use bytes::{Buf, BufMut, Bytes, BytesMut};
use log::warn;

use crate::cid::ContentId;
use crate::peer::PeerId;
use crate::wire::WireError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    N(u32),
    All,
}

impl Factor {
    const ALL_WIRE: u32 = u32::MAX;

    pub fn to_wire(self) -> u32 {
        match self {
            Factor::All => Self::ALL_WIRE,
            Factor::N(n) => n,
        }
    }

    pub fn from_wire(v: u32) -> Self {
        if v == Self::ALL_WIRE {
            Factor::All
        } else {
            Factor::N(v)
        }
    }
}

impl std::str::FromStr for Factor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Factor::All);
        }
        match s.parse::<u32>() {
            Ok(n) if n > 0 && n != Self::ALL_WIRE => Ok(Factor::N(n)),
            _ => Err(format!("replication factor must be a positive integer or ALL, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PinEntry {
    pub digest: ContentId,
    pub factor: Factor,
    pub lamport: u64,
    pub writer: PeerId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TagRecord {
    pub digest: ContentId,
    pub lamport: u64,
    pub writer: PeerId,
}

impl TagRecord {
    fn beats(&self, other: &TagRecord) -> bool {
        (self.lamport, self.writer, self.digest) > (other.lamport, other.writer, other.digest)
    }
}

pub type TagKey = (String, String);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PinsetState {
    pub pins: BTreeSet<PinEntry>,
    pub tags: BTreeMap<TagKey, TagRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeOutcome {
    pub new_pins: Vec<PinEntry>,
    pub tags_changed: usize,
}

impl MergeOutcome {
    pub fn changed(&self) -> bool {
        !self.new_pins.is_empty() || self.tags_changed > 0
    }
}

impl PinsetState {
    pub fn merge(&mut self, other: &PinsetState) -> MergeOutcome {
        let mut out = MergeOutcome::default();
        for p in &other.pins {
            if self.pins.insert(p.clone()) {
                out.new_pins.push(p.clone());
            }
        }
        out.tags_changed = self.merge_tags(other);
        out
    }

    fn merge_tags(&mut self, other: &PinsetState) -> usize {
        let mut changed = 0;
        for (k, rec) in &other.tags {
            match self.tags.get(k) {
                Some(cur) if !rec.beats(cur) => {}
                _ => {
                    self.tags.insert(k.clone(), rec.clone());
                    changed += 1;
                }
            }
        }
        changed
    }

    pub fn max_lamport(&self) -> u64 {
        let p = self.pins.iter().map(|p| p.lamport).max().unwrap_or(0);
        let t = self.tags.values().map(|t| t.lamport).max().unwrap_or(0);
        p.max(t)
    }

    /// Strongest factor any entry requests for `digest`.
    pub fn factor_for(&self, digest: &ContentId) -> Option<Factor> {
        self.pins
            .iter()
            .filter(|p| p.digest == *digest)
            .map(|p| p.factor)
            .max()
    }

    pub fn pinned_digests(&self) -> Vec<ContentId> {
        let set: BTreeSet<ContentId> = self.pins.iter().map(|p| p.digest).collect();
        set.into_iter().collect()
    }

    pub fn resolve_tag(&self, name: &str, tag: &str) -> Option<ContentId> {
        self.tags
            .get(&(name.to_string(), tag.to_string()))
            .map(|r| r.digest)
    }

    pub fn encode(&self) -> Bytes {
        let mut b = BytesMut::new();
        b.put_u32(self.pins.len() as u32);
        for p in &self.pins {
            b.put_slice(p.digest.as_bytes());
            b.put_u32(p.factor.to_wire());
            b.put_u64(p.lamport);
            b.put_slice(p.writer.as_bytes());
        }
        for ((name, tag), r) in &self.tags {
            b.put_u16(name.len() as u16);
            b.put_slice(name.as_bytes());
            b.put_u16(tag.len() as u16);
            b.put_slice(tag.as_bytes());
            b.put_slice(r.digest.as_bytes());
            b.put_u64(r.lamport);
            b.put_slice(r.writer.as_bytes());
        }
        b.freeze()
    }

    pub fn decode(mut buf: &[u8]) -> Result<PinsetState, WireError> {
        let mut state = PinsetState::default();
        let count = take_u32(&mut buf)?;
        for _ in 0..count {
            let digest = ContentId::from_bytes(take_32(&mut buf)?);
            let factor = Factor::from_wire(take_u32(&mut buf)?);
            let lamport = take_u64(&mut buf)?;
            let writer = PeerId::from_bytes(take_32(&mut buf)?);
            state.pins.insert(PinEntry {
                digest,
                factor,
                lamport,
                writer,
            });
        }
        while buf.has_remaining() {
            let name = take_str(&mut buf)?;
            let tag = take_str(&mut buf)?;
            let rec = TagRecord {
                digest: ContentId::from_bytes(take_32(&mut buf)?),
                lamport: take_u64(&mut buf)?,
                writer: PeerId::from_bytes(take_32(&mut buf)?),
            };
            let key = (name, tag);
            match state.tags.get(&key) {
                Some(cur) if !rec.beats(cur) => {}
                _ => {
                    state.tags.insert(key, rec);
                }
            }
        }
        Ok(state)
    }
}

fn need(buf: &[u8], n: usize) -> Result<(), WireError> {
    if buf.len() < n {
        Err(WireError::Truncated)
    } else {
        Ok(())
    }
}

fn take_u32(buf: &mut &[u8]) -> Result<u32, WireError> {
    need(buf, 4)?;
    Ok(buf.get_u32())
}

fn take_u64(buf: &mut &[u8]) -> Result<u64, WireError> {
    need(buf, 8)?;
    Ok(buf.get_u64())
}

fn take_32(buf: &mut &[u8]) -> Result<[u8; 32], WireError> {
    need(buf, 32)?;
    let mut out = [0u8; 32];
    buf.copy_to_slice(&mut out);
    Ok(out)
}

fn take_str(buf: &mut &[u8]) -> Result<String, WireError> {
    need(buf, 2)?;
    let len = buf.get_u16() as usize;
    need(buf, len)?;
    let s = std::str::from_utf8(&buf[..len])
        .map_err(|_| WireError::Malformed("tag text is not UTF-8"))?
        .to_string();
    buf.advance(len);
    Ok(s)
}

/// Rendezvous placement: members ranked by SHA-256(digest ‖ peer id), top
/// `factor` kept. The result is in rank order.
pub fn place_replicas(digest: &ContentId, factor: Factor, members: &[PeerId]) -> Vec<PeerId> {
    let mut ranked: Vec<(ContentId, PeerId)> = members
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|p| {
            let mut buf = [0u8; 64];
            buf[..32].copy_from_slice(digest.as_bytes());
            buf[32..].copy_from_slice(p.as_bytes());
            (ContentId::digest(&buf), *p)
        })
        .collect();
    ranked.sort_by(|a, b| b.cmp(a));
    let n = match factor {
        Factor::All => ranked.len(),
        Factor::N(n) => {
            let n = n as usize;
            if n > ranked.len() {
                warn!(
                    "replication factor {n} exceeds membership of {}, clamping",
                    ranked.len()
                );
            }
            n.min(ranked.len())
        }
    };
    ranked.into_iter().take(n).map(|(_, p)| p).collect()
}

/// One node's replica of the pinset with its Lamport clock.
#[derive(Debug, Clone)]
pub struct Replica {
    me: PeerId,
    members: HashSet<PeerId>,
    clock: u64,
    state: PinsetState,
}

impl Replica {
    /// `members` is the site membership; pins written by anyone else are
    /// ignored on merge while their tags are still accepted.
    pub fn new(me: PeerId, members: impl IntoIterator<Item = PeerId>) -> Self {
        let mut members: HashSet<PeerId> = members.into_iter().collect();
        members.insert(me);
        Replica {
            me,
            members,
            clock: 0,
            state: PinsetState::default(),
        }
    }

    pub fn me(&self) -> PeerId {
        self.me
    }

    pub fn state(&self) -> &PinsetState {
        &self.state
    }

    pub fn members(&self) -> Vec<PeerId> {
        let mut v: Vec<_> = self.members.iter().copied().collect();
        v.sort();
        v
    }

    pub fn add_member(&mut self, peer: PeerId) {
        self.members.insert(peer);
    }

    pub fn is_member(&self, peer: &PeerId) -> bool {
        self.members.contains(peer)
    }

    fn tick(&mut self) -> u64 {
        self.clock = self.clock.max(self.state.max_lamport()) + 1;
        self.clock
    }

    /// Records a local pin. Returns the entry when it is new.
    pub fn pin(&mut self, digest: ContentId, factor: Factor) -> Option<PinEntry> {
        let existing = self
            .state
            .pins
            .iter()
            .any(|p| p.digest == digest && p.writer == self.me && p.factor >= factor);
        if existing {
            return None;
        }
        let entry = PinEntry {
            digest,
            factor,
            lamport: self.tick(),
            writer: self.me,
        };
        self.state.pins.insert(entry.clone());
        Some(entry)
    }

    pub fn set_tag(&mut self, name: &str, tag: &str, digest: ContentId) -> TagRecord {
        let rec = TagRecord {
            digest,
            lamport: self.tick(),
            writer: self.me,
        };
        self.state
            .tags
            .insert((name.to_string(), tag.to_string()), rec.clone());
        rec
    }

    pub fn resolve_tag(&self, name: &str, tag: &str) -> Option<ContentId> {
        self.state.resolve_tag(name, tag)
    }

    /// Merges a remote state, dropping pins whose writer is not a member.
    pub fn merge(&mut self, remote: &PinsetState) -> MergeOutcome {
        let filtered;
        let remote = if remote.pins.iter().all(|p| self.members.contains(&p.writer)) {
            remote
        } else {
            filtered = PinsetState {
                pins: remote
                    .pins
                    .iter()
                    .filter(|p| self.members.contains(&p.writer))
                    .cloned()
                    .collect(),
                tags: remote.tags.clone(),
            };
            &filtered
        };
        let out = self.state.merge(remote);
        self.clock = self.clock.max(self.state.max_lamport());
        out
    }

    /// Pinned digests whose placement includes this node.
    pub fn assigned_to_me(&self) -> Vec<ContentId> {
        let members = self.members();
        self.state
            .pinned_digests()
            .into_iter()
            .filter(|d| {
                let f = self.state.factor_for(d).unwrap_or(Factor::All);
                place_replicas(d, f, &members).contains(&self.me)
            })
            .collect()
    }

    pub fn is_assigned(&self, digest: &ContentId) -> bool {
        match self.state.factor_for(digest) {
            Some(f) => place_replicas(digest, f, &self.members()).contains(&self.me),
            None => false,
        }
    }
}
