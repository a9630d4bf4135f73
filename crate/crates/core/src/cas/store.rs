use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};

use bytes::Bytes;
use log::{debug, warn};

use super::backend::{Backend, MemoryBackend};
use super::dag::{DagNode, Link, NodeKind, MAX_NODE_BYTES};
use crate::cid::{ContentHasher, ContentId};
use crate::error::{CasError, Result};

pub const DEFAULT_CHUNK_SIZE: usize = 256 * 1024;
pub const MIN_CHUNK_SIZE: usize = 4096;
/// Largest block accepted from a peer, leaf or node.
pub const MAX_BLOCK_BYTES: usize = MAX_NODE_BYTES;

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub chunk_size: usize,
    /// Total bytes the store may hold, counting DAG metadata. `None` is unbounded.
    pub capacity: Option<u64>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            capacity: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreStats {
    pub unique_blocks: usize,
    pub physical_bytes: u64,
    /// Bytes summed over every registered file plus unreferenced blocks.
    pub logical_bytes: u64,
}

/// Bytes whose digest has been checked against their identifier.
#[derive(Debug, Clone)]
pub struct VerifiedBlock {
    cid: ContentId,
    data: Bytes,
}

impl VerifiedBlock {
    pub fn verify(cid: ContentId, data: Bytes) -> Option<Self> {
        (ContentId::digest(&data) == cid).then_some(VerifiedBlock { cid, data })
    }

    pub fn new(data: Bytes) -> Self {
        VerifiedBlock {
            cid: ContentId::digest(&data),
            data,
        }
    }

    pub fn cid(&self) -> ContentId {
        self.cid
    }

    pub fn data(&self) -> &Bytes {
        &self.data
    }

    pub fn into_data(self) -> Bytes {
        self.data
    }
}

/// Result of walking a DAG from its root.
#[derive(Debug, Clone)]
pub struct DagWalk {
    pub root: DagNode,
    /// Leaves in file order.
    pub leaves: Vec<Link>,
    /// Every interior node reached, root first.
    pub nodes: Vec<ContentId>,
    pub missing: Vec<ContentId>,
}

impl DagWalk {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockMeta {
    size: u64,
    /// Registered roots whose DAG contains this block.
    refs: u32,
    /// Pinned roots whose DAG contains this block.
    pin_refs: u32,
    present: bool,
}

#[derive(Debug, Clone)]
struct RootMeta {
    file_digest: ContentId,
    total_size: u64,
    members: Arc<Vec<ContentId>>,
    last_used: u64,
}

#[derive(Default)]
struct Index {
    blocks: HashMap<ContentId, BlockMeta>,
    roots: HashMap<ContentId, RootMeta>,
    by_digest: HashMap<ContentId, ContentId>,
    /// Pin count per root; a root stays pinned until every pin is released.
    pins: BTreeMap<ContentId, u32>,
    physical: u64,
    tick: u64,
}

impl Index {
    fn has(&self, cid: &ContentId) -> bool {
        self.blocks.get(cid).is_some_and(|m| m.present)
    }

    fn reclaimable(&self) -> u64 {
        self.blocks
            .values()
            .filter(|m| m.present && m.refs > 0 && m.pin_refs == 0)
            .map(|m| m.size)
            .sum()
    }
}

/// Content-addressed block store with pin-aware LRU eviction.
///
/// Eviction works on whole registered DAGs: the least recently used unpinned
/// root is dropped together with every block no other registered root still
/// references. Blocks not yet part of a registered DAG (in-flight fetches)
/// are never evicted.
pub struct Store {
    backend: Arc<dyn Backend>,
    config: StoreConfig,
    index: Mutex<Index>,
}

impl Store {
    pub fn open(backend: Arc<dyn Backend>, config: StoreConfig) -> Result<Store> {
        if config.chunk_size < MIN_CHUNK_SIZE || config.chunk_size > MAX_BLOCK_BYTES {
            return Err(CasError::InvalidArgument(format!(
                "chunk size {} outside [{MIN_CHUNK_SIZE}, {MAX_BLOCK_BYTES}]",
                config.chunk_size
            )));
        }
        let store = Store {
            backend,
            config,
            index: Mutex::new(Index::default()),
        };
        store.load()?;
        Ok(store)
    }

    pub fn in_memory(config: StoreConfig) -> Store {
        Store::open(Arc::new(MemoryBackend::new()), config).expect("memory store")
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn chunk_size(&self) -> usize {
        self.config.chunk_size
    }

    fn lock(&self) -> MutexGuard<'_, Index> {
        self.index.lock().unwrap()
    }

    fn load(&self) -> Result<()> {
        let scanned = self.backend.scan()?;
        {
            let mut idx = self.lock();
            for (cid, size) in &scanned {
                idx.blocks.insert(
                    *cid,
                    BlockMeta {
                        size: *size,
                        refs: 0,
                        pin_refs: 0,
                        present: true,
                    },
                );
                idx.physical += size;
            }
        }
        // Re-register complete roots so they are evictable and resolvable.
        for (cid, _) in &scanned {
            let Ok(data) = self.backend.get(cid) else { continue };
            let Some(data) = data else { continue };
            if !DagNode::looks_like_node(&data) {
                continue;
            }
            if let Ok(node) = DagNode::decode(&data) {
                if node.is_root() && ContentId::digest(&data) == *cid {
                    let _ = self.register_root(cid);
                }
            }
        }
        // Replay and compact the pin log.
        let mut pinned: BTreeMap<ContentId, u32> = BTreeMap::new();
        for line in self.backend.read_pin_log()? {
            match line.split_once(' ') {
                Some(("pin", c)) => {
                    if let Ok(cid) = c.parse() {
                        *pinned.entry(cid).or_default() += 1;
                    }
                }
                Some(("unpin", c)) => {
                    if let Ok(cid) = c.parse::<ContentId>() {
                        if let Some(n) = pinned.get_mut(&cid) {
                            *n -= 1;
                            if *n == 0 {
                                pinned.remove(&cid);
                            }
                        }
                    }
                }
                _ => warn!("ignoring pin log line {line:?}"),
            }
        }
        let mut kept = Vec::new();
        for (cid, n) in pinned {
            for _ in 0..n {
                match self.pin_inner(&cid, false) {
                    Ok(()) => kept.push(format!("pin {cid}")),
                    Err(e) => {
                        warn!("dropping pin {cid} on load: {e}");
                        break;
                    }
                }
            }
        }
        self.backend.rewrite_pin_log(&kept)?;
        Ok(())
    }

    /// Stores a leaf written locally. Idempotent.
    pub fn put_block(&self, data: &[u8]) -> Result<ContentId> {
        if data.len() > self.config.chunk_size {
            return Err(CasError::BlockTooLarge {
                len: data.len(),
                limit: self.config.chunk_size,
            });
        }
        let cid = ContentId::digest(data);
        self.insert(cid, data)?;
        Ok(cid)
    }

    pub fn put_node(&self, node: &DagNode) -> Result<ContentId> {
        let enc = node.encode();
        if enc.len() > MAX_NODE_BYTES {
            return Err(CasError::BlockTooLarge {
                len: enc.len(),
                limit: MAX_NODE_BYTES,
            });
        }
        let cid = ContentId::digest(&enc);
        self.insert(cid, &enc)?;
        Ok(cid)
    }

    /// Stores a block received from elsewhere whose digest is already checked.
    pub fn put_verified(&self, block: &VerifiedBlock) -> Result<()> {
        if block.data.len() > MAX_BLOCK_BYTES {
            return Err(CasError::BlockTooLarge {
                len: block.data.len(),
                limit: MAX_BLOCK_BYTES,
            });
        }
        self.insert(block.cid, &block.data)
    }

    pub(super) fn insert(&self, cid: ContentId, data: &[u8]) -> Result<()> {
        let mut idx = self.lock();
        if idx.has(&cid) {
            return Ok(());
        }
        let len = data.len() as u64;
        self.make_room(&mut idx, len)?;
        self.backend.put(&cid, data)?;
        let meta = idx.blocks.entry(cid).or_insert(BlockMeta {
            size: len,
            refs: 0,
            pin_refs: 0,
            present: false,
        });
        meta.present = true;
        meta.size = len;
        idx.physical += len;
        Ok(())
    }

    fn make_room(&self, idx: &mut Index, needed: u64) -> Result<()> {
        let Some(cap) = self.config.capacity else {
            return Ok(());
        };
        if idx.physical + needed <= cap {
            return Ok(());
        }
        let reclaimable = idx.reclaimable();
        if idx.physical + needed > cap + reclaimable {
            return Err(CasError::Capacity {
                needed,
                available: (cap + reclaimable).saturating_sub(idx.physical),
            });
        }
        let mut lru: Vec<(u64, ContentId)> = idx
            .roots
            .iter()
            .filter(|(c, _)| !idx.pins.contains_key(*c))
            .map(|(c, m)| (m.last_used, *c))
            .collect();
        lru.sort();
        for (_, root) in lru {
            if idx.physical + needed <= cap {
                break;
            }
            self.evict_root(idx, &root)?;
        }
        if idx.physical + needed > cap {
            return Err(CasError::Capacity {
                needed,
                available: cap.saturating_sub(idx.physical),
            });
        }
        Ok(())
    }

    fn evict_root(&self, idx: &mut Index, root: &ContentId) -> Result<()> {
        let Some(meta) = idx.roots.remove(root) else {
            return Ok(());
        };
        debug!("evicting dag {}", root.short());
        if idx.by_digest.get(&meta.file_digest) == Some(root) {
            idx.by_digest.remove(&meta.file_digest);
        }
        for member in meta.members.iter() {
            let Some(b) = idx.blocks.get_mut(member) else { continue };
            b.refs = b.refs.saturating_sub(1);
            if b.refs == 0 && b.pin_refs == 0 {
                let was_present = b.present;
                let size = b.size;
                idx.blocks.remove(member);
                if was_present {
                    self.backend.delete(member)?;
                    idx.physical -= size;
                }
            }
        }
        Ok(())
    }

    pub fn has(&self, cid: &ContentId) -> bool {
        self.lock().has(cid)
    }

    /// Reads and re-verifies a block. Corrupt blocks are quarantined.
    pub fn get_block(&self, cid: &ContentId) -> Result<Bytes> {
        if !self.has(cid) {
            return Err(CasError::NotFound(*cid));
        }
        let Some(data) = self.backend.get(cid)? else {
            self.forget(cid);
            return Err(CasError::NotFound(*cid));
        };
        if ContentId::digest(&data) != *cid {
            warn!("block {cid} failed re-hash, quarantining");
            self.backend.quarantine(cid)?;
            self.forget(cid);
            return Err(CasError::Integrity(*cid));
        }
        Ok(data)
    }

    fn forget(&self, cid: &ContentId) {
        let mut idx = self.lock();
        if let Some(m) = idx.blocks.get_mut(cid) {
            if m.present {
                m.present = false;
                let size = m.size;
                idx.physical -= size;
            }
            let m = idx.blocks[cid];
            if m.refs == 0 && m.pin_refs == 0 {
                idx.blocks.remove(cid);
            }
        }
    }

    pub fn get_node(&self, cid: &ContentId) -> Result<DagNode> {
        let data = self.get_block(cid)?;
        DagNode::decode(&data)
    }

    /// Walks the DAG below `root`, reporting absent blocks instead of failing.
    pub fn walk(&self, root: &ContentId) -> Result<DagWalk> {
        let root_node = self.get_node(root)?;
        let mut walk = DagWalk {
            root: root_node.clone(),
            leaves: Vec::new(),
            nodes: vec![*root],
            missing: Vec::new(),
        };
        self.walk_node(&root_node, &mut walk)?;
        Ok(walk)
    }

    fn walk_node(&self, node: &DagNode, walk: &mut DagWalk) -> Result<()> {
        match node.kind {
            NodeKind::Interior => {
                let idx = self.lock();
                for link in &node.links {
                    if !idx.has(&link.cid) {
                        walk.missing.push(link.cid);
                    }
                    walk.leaves.push(*link);
                }
            }
            NodeKind::Upper => {
                for link in &node.links {
                    match self.get_node(&link.cid) {
                        Ok(child) => {
                            walk.nodes.push(link.cid);
                            self.walk_node(&child, walk)?;
                        }
                        Err(CasError::NotFound(_)) | Err(CasError::Integrity(_)) => {
                            walk.missing.push(link.cid)
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(())
    }

    /// Absent blocks of the DAG below `root`; `[root]` when the root itself is absent.
    pub fn missing(&self, root: &ContentId) -> Vec<ContentId> {
        match self.walk(root) {
            Ok(w) => w.missing,
            Err(_) => vec![*root],
        }
    }

    pub fn is_complete(&self, root: &ContentId) -> bool {
        self.walk(root).map(|w| w.is_complete()).unwrap_or(false)
    }

    /// Records a complete DAG so it becomes resolvable by file digest and evictable.
    pub fn register_root(&self, root: &ContentId) -> Result<()> {
        let walk = self.walk(root)?;
        if !walk.is_complete() {
            return Err(CasError::MissingChildren(walk.missing));
        }
        let file_digest = walk.root.file_digest.ok_or_else(|| {
            CasError::InvalidArgument(format!("{root} is not a root node"))
        })?;
        let mut seen = HashSet::new();
        let members: Vec<ContentId> = walk
            .nodes
            .iter()
            .copied()
            .chain(walk.leaves.iter().map(|l| l.cid))
            .filter(|c| seen.insert(*c))
            .collect();
        let mut idx = self.lock();
        idx.tick += 1;
        let tick = idx.tick;
        if let Some(meta) = idx.roots.get_mut(root) {
            meta.last_used = tick;
            return Ok(());
        }
        let pinned = idx.pins.contains_key(root);
        for m in &members {
            if let Some(b) = idx.blocks.get_mut(m) {
                b.refs += 1;
                if pinned {
                    b.pin_refs += 1;
                }
            }
        }
        idx.by_digest.insert(file_digest, *root);
        idx.roots.insert(
            *root,
            RootMeta {
                file_digest,
                total_size: walk.root.total_size,
                members: Arc::new(members),
                last_used: tick,
            },
        );
        Ok(())
    }

    /// Root of a registered DAG whose file has this digest.
    pub fn resolve_digest(&self, file_digest: &ContentId) -> Option<ContentId> {
        self.lock().by_digest.get(file_digest).copied()
    }

    /// `(file digest, total size)` of a registered root.
    pub fn root_info(&self, root: &ContentId) -> Option<(ContentId, u64)> {
        self.lock()
            .roots
            .get(root)
            .map(|m| (m.file_digest, m.total_size))
    }

    pub fn roots(&self) -> Vec<ContentId> {
        let mut v: Vec<_> = self.lock().roots.keys().copied().collect();
        v.sort();
        v
    }

    pub fn touch(&self, root: &ContentId) {
        let mut idx = self.lock();
        idx.tick += 1;
        let tick = idx.tick;
        if let Some(m) = idx.roots.get_mut(root) {
            m.last_used = tick;
        }
    }

    /// Adds one pin; [`Store::unpin`] releases one.
    pub fn pin(&self, root: &ContentId) -> Result<()> {
        self.pin_inner(root, true)
    }

    fn pin_inner(&self, root: &ContentId, log: bool) -> Result<()> {
        if !self.has(root) {
            return Err(CasError::NotFound(*root));
        }
        self.register_root(root)?;
        let mut idx = self.lock();
        let count = idx.pins.entry(*root).or_insert(0);
        *count += 1;
        if *count == 1 {
            let members = idx.roots[root].members.clone();
            for m in members.iter() {
                if let Some(b) = idx.blocks.get_mut(m) {
                    b.pin_refs += 1;
                }
            }
        }
        drop(idx);
        if log {
            self.backend.append_pin_log(&format!("pin {root}"))?;
        }
        Ok(())
    }

    pub fn unpin(&self, root: &ContentId) -> Result<()> {
        let mut idx = self.lock();
        let Some(count) = idx.pins.get_mut(root) else {
            return Ok(());
        };
        *count -= 1;
        if *count > 0 {
            drop(idx);
            self.backend.append_pin_log(&format!("unpin {root}"))?;
            return Ok(());
        }
        idx.pins.remove(root);
        if let Some(meta) = idx.roots.get(root) {
            let members = meta.members.clone();
            for m in members.iter() {
                if let Some(b) = idx.blocks.get_mut(m) {
                    b.pin_refs = b.pin_refs.saturating_sub(1);
                }
            }
        }
        drop(idx);
        self.backend.append_pin_log(&format!("unpin {root}"))?;
        Ok(())
    }

    pub fn is_pinned(&self, root: &ContentId) -> bool {
        self.lock().pins.contains_key(root)
    }

    pub fn pinned(&self) -> Vec<ContentId> {
        self.lock().pins.keys().copied().collect()
    }

    /// Streams the file below `root` into `out`, verifying every leaf and the
    /// whole-file digest. Returns the number of bytes written.
    pub fn assemble_to(&self, root: &ContentId, out: &mut impl Write) -> Result<u64> {
        let walk = self.walk(root)?;
        if !walk.is_complete() {
            return Err(CasError::MissingChildren(walk.missing));
        }
        let expected = walk.root.file_digest.ok_or_else(|| {
            CasError::InvalidArgument(format!("{root} is not a root node"))
        })?;
        let mut hasher = ContentHasher::new();
        let mut written = 0u64;
        for leaf in &walk.leaves {
            let data = self.get_block(&leaf.cid)?;
            if data.len() as u64 != leaf.size {
                return Err(CasError::MalformedNode(format!(
                    "leaf {} is {} bytes, link says {}",
                    leaf.cid,
                    data.len(),
                    leaf.size
                )));
            }
            hasher.update(&data);
            out.write_all(&data)?;
            written += data.len() as u64;
        }
        let actual = hasher.finish();
        if actual != expected || written != walk.root.total_size {
            return Err(CasError::DigestMismatch { expected, actual });
        }
        self.touch(root);
        Ok(written)
    }

    pub fn assemble(&self, root: &ContentId) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.assemble_to(root, &mut out)?;
        Ok(out)
    }

    pub fn stats(&self) -> StoreStats {
        let idx = self.lock();
        let mut logical = 0u64;
        for meta in idx.roots.values() {
            for m in meta.members.iter() {
                if let Some(b) = idx.blocks.get(m) {
                    if b.present {
                        logical += b.size;
                    }
                }
            }
        }
        logical += idx
            .blocks
            .values()
            .filter(|b| b.present && b.refs == 0)
            .map(|b| b.size)
            .sum::<u64>();
        StoreStats {
            unique_blocks: idx.blocks.values().filter(|b| b.present).count(),
            physical_bytes: idx.physical,
            logical_bytes: logical,
        }
    }

    /// Every present block identifier.
    pub fn block_ids(&self) -> Vec<ContentId> {
        let idx = self.lock();
        let mut v: Vec<_> = idx
            .blocks
            .iter()
            .filter(|(_, m)| m.present)
            .map(|(c, _)| *c)
            .collect();
        v.sort();
        v
    }
}
