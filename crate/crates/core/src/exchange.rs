//! Want-list block exchange: the per-fetch scheduling session and the
//! round-robin upload queue that serves other peers.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::cid::ContentId;
use crate::time::{millis, secs, Micros, Timestamp};

#[derive(Debug, Clone)]
pub struct ExchangeConfig {
    pub block_timeout: Micros,
    pub stall_timeout: Micros,
    /// How long a DONT_HAVE keeps a block off a peer's schedule.
    pub lacks_ttl: Micros,
    /// Outstanding blocks per site peer.
    pub peer_window: usize,
    /// Outstanding blocks at the origin fallback.
    pub origin_window: usize,
    pub max_parallel: usize,
    /// Quiet period after which a session asks the origin for blocks
    /// another peer ranks first on.
    pub takeover_after: Micros,
    /// Share of the session, in percent, left when duplicate requests start.
    pub endgame_percent: usize,
    pub endgame_duplication: usize,
    pub ewma_alpha: f64,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        ExchangeConfig {
            block_timeout: secs(10),
            stall_timeout: secs(30),
            lacks_ttl: millis(1500),
            peer_window: 2,
            origin_window: 2,
            max_parallel: 8,
            takeover_after: secs(2),
            endgame_percent: 5,
            endgame_duplication: 2,
            ewma_alpha: 0.3,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct PeerState {
    /// Observed goodput in bits per second; `None` until the first block.
    ewma_bps: Option<f64>,
    outstanding: usize,
    blocks: u64,
    unavailable_until: Timestamp,
}

#[derive(Debug, Clone)]
struct Request {
    peer: String,
    sent_at: Timestamp,
    deadline: Timestamp,
}

/// Why a session gave up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchFailure {
    /// Every source answered that it does not hold the content.
    NotFound,
    /// No source could be reached or made progress; lists what is missing.
    Incomplete(Vec<ContentId>),
}

/// Scheduling state of one DAG fetch.
///
/// The session starts wanting only its key (the registry digest, which
/// resolves to the root node). The owner then widens the want set with the
/// DAG's missing blocks. Site peers are preferred; the origin is asked only
/// for blocks every live site peer has recently denied holding.
#[derive(Debug, Clone)]
pub struct FetchSession {
    pub key: ContentId,
    pub root: Option<ContentId>,
    cfg: ExchangeConfig,
    order: Vec<ContentId>,
    wanted: HashSet<ContentId>,
    outstanding: HashMap<ContentId, Vec<Request>>,
    peers: BTreeMap<String, PeerState>,
    origin: Option<String>,
    origin_state: PeerState,
    local: Option<String>,
    lacks: HashMap<(String, ContentId), Timestamp>,
    total: usize,
    received: usize,
    pub started: Timestamp,
    last_progress: Timestamp,
    pub bytes_origin: u64,
    pub bytes_peers: u64,
    origin_denied_key: bool,
}

impl FetchSession {
    pub fn new(key: ContentId, origin: Option<String>, now: Timestamp, cfg: ExchangeConfig) -> Self {
        FetchSession {
            key,
            root: None,
            cfg,
            order: vec![key],
            wanted: HashSet::from([key]),
            outstanding: HashMap::new(),
            peers: BTreeMap::new(),
            origin,
            origin_state: PeerState::default(),
            local: None,
            lacks: HashMap::new(),
            total: 1,
            received: 0,
            started: now,
            last_progress: now,
            bytes_origin: 0,
            bytes_peers: 0,
            origin_denied_key: false,
        }
    }

    pub fn origin(&self) -> Option<&str> {
        self.origin.as_deref()
    }

    /// Names the local node so origin fetches can be split with peers.
    pub fn set_local(&mut self, addr: &str) {
        self.local = Some(addr.to_string());
    }

    pub fn add_providers(&mut self, addrs: impl IntoIterator<Item = String>) {
        for a in addrs {
            if Some(&a) != self.origin.as_ref() {
                self.peers.entry(a).or_default();
            }
        }
    }

    pub fn has_peer(&self, addr: &str) -> bool {
        self.peers.contains_key(addr)
    }

    pub fn providers(&self) -> Vec<String> {
        self.peers.keys().cloned().collect()
    }

    /// Adds blocks to fetch, in the order they should be requested.
    pub fn want(&mut self, cids: impl IntoIterator<Item = ContentId>) {
        for c in cids {
            if self.wanted.insert(c) {
                self.order.push(c);
                self.total += 1;
            }
        }
    }

    pub fn is_wanted(&self, cid: &ContentId) -> bool {
        self.wanted.contains(cid)
    }

    pub fn is_done(&self) -> bool {
        self.wanted.is_empty()
    }

    pub fn missing(&self) -> Vec<ContentId> {
        self.order
            .iter()
            .filter(|c| self.wanted.contains(c))
            .copied()
            .collect()
    }

    pub fn progress(&self) -> (usize, usize) {
        (self.received, self.total)
    }

    fn state(&self, addr: &str) -> Option<&PeerState> {
        if Some(addr) == self.origin.as_deref() {
            Some(&self.origin_state)
        } else {
            self.peers.get(addr)
        }
    }

    fn state_mut(&mut self, addr: &str) -> Option<&mut PeerState> {
        if Some(addr) == self.origin.as_deref() {
            Some(&mut self.origin_state)
        } else {
            self.peers.get_mut(addr)
        }
    }

    fn lacks(&self, peer: &str, cid: &ContentId, now: Timestamp) -> bool {
        self.lacks
            .get(&(peer.to_string(), *cid))
            .is_some_and(|until| *until > now)
    }

    fn live_peers(&self, now: Timestamp) -> Vec<String> {
        let mut v: Vec<(&String, &PeerState)> = self
            .peers
            .iter()
            .filter(|(_, s)| s.unavailable_until <= now)
            .collect();
        // Untested peers first, then by throughput; the address breaks ties.
        v.sort_by(|a, b| {
            let ka = a.1.ewma_bps.unwrap_or(f64::INFINITY);
            let kb = b.1.ewma_bps.unwrap_or(f64::INFINITY);
            kb.total_cmp(&ka).then_with(|| a.0.cmp(b.0))
        });
        v.truncate(self.cfg.max_parallel);
        v.into_iter().map(|(a, _)| a.clone()).collect()
    }

    pub fn has_live_source(&self, now: Timestamp) -> bool {
        !self.live_peers(now).is_empty()
            || (self.origin.is_some() && self.origin_state.unavailable_until <= now)
    }

    fn in_endgame(&self) -> bool {
        let remaining = self.wanted.len();
        remaining <= (self.total * self.cfg.endgame_percent / 100).max(1)
    }

    /// Assigns wanted blocks to free request slots. Each returned batch is
    /// one WANT message.
    pub fn schedule(&mut self, now: Timestamp) -> Vec<(String, Vec<ContentId>)> {
        let dup_limit = if self.in_endgame() {
            self.cfg.endgame_duplication
        } else {
            1
        };
        let mut batches = Vec::new();
        let live = self.live_peers(now);
        for peer in &live {
            let free = self
                .cfg
                .peer_window
                .saturating_sub(self.peers[peer].outstanding);
            let mut picked = Vec::new();
            for cid in &self.order {
                if picked.len() >= free {
                    break;
                }
                if !self.wanted.contains(cid) || self.lacks(peer, cid, now) {
                    continue;
                }
                let out = self.outstanding.get(cid);
                let count = out.map_or(0, |v| v.len());
                if count >= dup_limit || out.is_some_and(|v| v.iter().any(|r| &r.peer == peer)) {
                    continue;
                }
                picked.push(*cid);
            }
            if !picked.is_empty() {
                self.record(peer, &picked, now);
                batches.push((peer.clone(), picked));
            }
        }
        if let Some(origin) = self.origin.clone() {
            if self.origin_state.unavailable_until <= now {
                let free = self
                    .cfg
                    .origin_window
                    .saturating_sub(self.origin_state.outstanding);
                let eligible = |cid: &ContentId| {
                    self.wanted.contains(cid)
                        && !self.outstanding.contains_key(cid)
                        && !self.lacks(&origin, cid, now)
                        && live.iter().all(|p| self.lacks(p, cid, now))
                };
                // Blocks nobody on the site holds are split between the
                // peers fetching them: each asks the origin for those it
                // ranks first on. A session that has nothing of its own in
                // flight and has heard nothing for a while takes over the rest.
                let mut picked: Vec<ContentId> = self
                    .order
                    .iter()
                    .filter(|c| eligible(c) && self.owns(c, &live))
                    .take(free)
                    .copied()
                    .collect();
                if picked.is_empty()
                    && self.origin_state.outstanding == 0
                    && now.saturating_sub(self.last_progress) >= self.cfg.takeover_after
                {
                    picked = self.order.iter().filter(|c| eligible(c)).take(free).copied().collect();
                }
                if !picked.is_empty() {
                    self.record(&origin, &picked, now);
                    batches.push((origin, picked));
                }
            }
        }
        batches
    }

    /// Whether the local node ranks first for `cid` among itself and `live`.
    fn owns(&self, cid: &ContentId, live: &[String]) -> bool {
        let Some(me) = &self.local else { return true };
        let mine = rank(cid, me);
        live.iter().all(|p| rank(cid, p) < mine)
    }

    fn record(&mut self, peer: &str, cids: &[ContentId], now: Timestamp) {
        let deadline = now + self.cfg.block_timeout;
        for c in cids {
            self.outstanding.entry(*c).or_default().push(Request {
                peer: peer.to_string(),
                sent_at: now,
                deadline,
            });
        }
        if let Some(s) = self.state_mut(peer) {
            s.outstanding += cids.len();
        }
    }

    fn release(&mut self, peer: &str, cid: &ContentId) -> Option<Request> {
        let reqs = self.outstanding.get_mut(cid)?;
        let pos = reqs.iter().position(|r| r.peer == peer)?;
        let req = reqs.remove(pos);
        if reqs.is_empty() {
            self.outstanding.remove(cid);
        }
        if let Some(s) = self.state_mut(peer) {
            s.outstanding = s.outstanding.saturating_sub(1);
        }
        Some(req)
    }

    /// Records a verified block. Returns false when it was not wanted.
    pub fn on_block(&mut self, from: &str, cid: &ContentId, len: usize, now: Timestamp) -> bool {
        let req = self.release(from, cid);
        if !self.wanted.remove(cid) {
            return false;
        }
        // Other duplicate requests for this block are abandoned.
        if let Some(others) = self.outstanding.remove(cid) {
            for r in others {
                if let Some(s) = self.state_mut(&r.peer) {
                    s.outstanding = s.outstanding.saturating_sub(1);
                }
            }
        }
        self.received += 1;
        self.last_progress = now;
        if Some(from) == self.origin.as_deref() {
            self.bytes_origin += len as u64;
        } else {
            self.bytes_peers += len as u64;
        }
        let alpha = self.cfg.ewma_alpha;
        if let Some(s) = self.state_mut(from) {
            s.blocks += 1;
            if let Some(r) = req {
                let elapsed = (now - r.sent_at).max(1) as f64 / 1e6;
                let sample = len as f64 * 8.0 / elapsed;
                s.ewma_bps = Some(match s.ewma_bps {
                    Some(prev) => alpha * sample + (1.0 - alpha) * prev,
                    None => sample,
                });
            }
        }
        true
    }

    pub fn on_dont_have(&mut self, from: &str, cid: &ContentId, now: Timestamp) {
        if self.release(from, cid).is_none() && self.state(from).is_none() {
            return;
        }
        self.lacks
            .insert((from.to_string(), *cid), now + self.cfg.lacks_ttl);
        if Some(from) == self.origin.as_deref() && *cid == self.key && self.root.is_none() {
            self.origin_denied_key = true;
        }
    }

    /// A source could not be reached: drop its requests and rest it.
    pub fn on_unreachable(&mut self, addr: &str, now: Timestamp) {
        let cids: Vec<ContentId> = self
            .outstanding
            .iter()
            .filter(|(_, v)| v.iter().any(|r| r.peer == addr))
            .map(|(c, _)| *c)
            .collect();
        for c in cids {
            self.release(addr, &c);
        }
        let until = now + secs(5);
        if let Some(s) = self.state_mut(addr) {
            s.unavailable_until = until;
        }
    }

    /// Expires overdue requests; returns how many were reassigned.
    pub fn on_tick(&mut self, now: Timestamp) -> usize {
        let overdue: Vec<(ContentId, String)> = self
            .outstanding
            .iter()
            .flat_map(|(c, v)| {
                v.iter()
                    .filter(|r| r.deadline <= now)
                    .map(move |r| (*c, r.peer.clone()))
            })
            .collect();
        for (c, p) in &overdue {
            self.release(p, c);
            self.lacks.insert((p.clone(), *c), now + self.cfg.lacks_ttl);
            if let Some(s) = self.state_mut(p) {
                s.ewma_bps = Some(s.ewma_bps.unwrap_or(1.0) * 0.5);
            }
        }
        self.lacks.retain(|_, until| *until > now);
        overdue.len()
    }

    pub fn is_stalled(&self, now: Timestamp) -> bool {
        now.saturating_sub(self.last_progress) >= self.cfg.stall_timeout
    }

    /// The key was denied by the origin and no site peer is known.
    pub fn is_not_found(&self) -> bool {
        self.origin_denied_key && self.root.is_none() && self.peers.is_empty()
    }

    pub fn outstanding_at(&self, peer: &str) -> usize {
        self.state(peer).map_or(0, |s| s.outstanding)
    }

    /// Blocks delivered per source address.
    pub fn served_by(&self) -> BTreeMap<String, u64> {
        let mut m: BTreeMap<String, u64> =
            self.peers.iter().map(|(a, s)| (a.clone(), s.blocks)).collect();
        if let Some(o) = &self.origin {
            m.insert(o.clone(), self.origin_state.blocks);
        }
        m
    }
}

fn rank(cid: &ContentId, addr: &str) -> u64 {
    let mut h = u64::from_le_bytes(cid.as_bytes()[..8].try_into().unwrap());
    for b in addr.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Pending requests from other peers, served one block per peer per round.
#[derive(Debug, Default)]
pub struct UploadQueue {
    queues: HashMap<String, VecDeque<ContentId>>,
    ring: VecDeque<String>,
    limit: usize,
}

impl UploadQueue {
    pub fn new(per_peer_limit: usize) -> Self {
        UploadQueue {
            limit: per_peer_limit,
            ..Default::default()
        }
    }

    /// Queues `cids` for `peer`; requests beyond the per-peer limit are dropped.
    pub fn push(&mut self, peer: &str, cids: impl IntoIterator<Item = ContentId>) {
        let q = self.queues.entry(peer.to_string()).or_default();
        let was_empty = q.is_empty();
        for c in cids {
            if q.len() < self.limit {
                q.push_back(c);
            }
        }
        if was_empty && !q.is_empty() {
            self.ring.push_back(peer.to_string());
        }
    }

    pub fn pop(&mut self) -> Option<(String, ContentId)> {
        let peer = self.ring.pop_front()?;
        let q = self.queues.get_mut(&peer)?;
        let cid = q.pop_front()?;
        if q.is_empty() {
            self.queues.remove(&peer);
        } else {
            self.ring.push_back(peer.clone());
        }
        Some((peer, cid))
    }

    pub fn drop_peer(&mut self, peer: &str) {
        self.queues.remove(peer);
        self.ring.retain(|p| p != peer);
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cids(n: u8) -> Vec<ContentId> {
        (0..n).map(|i| ContentId::digest(&[i])).collect()
    }

    fn session_with_leaves(n: u8, peers: &[&str], origin: Option<&str>) -> FetchSession {
        let key = ContentId::digest(b"key");
        let mut s = FetchSession::new(key, origin.map(String::from), 0, ExchangeConfig::default());
        s.add_providers(peers.iter().map(|p| p.to_string()));
        s.on_block(peers.first().copied().unwrap_or("o"), &key, 100, 0);
        s.root = Some(key);
        s.want(cids(n));
        s
    }

    fn origin_picks(local: &str, peer: &str, leaves: &[ContentId], now: Timestamp) -> HashSet<ContentId> {
        let key = ContentId::digest(b"key");
        let cfg = ExchangeConfig {
            origin_window: 1000,
            ..ExchangeConfig::default()
        };
        let mut s = FetchSession::new(key, Some("origin".into()), 0, cfg);
        s.set_local(local);
        s.add_providers([peer.to_string()]);
        s.on_block(peer, &key, 100, 0);
        s.root = Some(key);
        s.want(leaves.iter().copied());
        for c in leaves {
            s.on_dont_have(peer, c, 0);
        }
        s.schedule(now)
            .into_iter()
            .filter(|(p, _)| p == "origin")
            .flat_map(|(_, cs)| cs)
            .collect()
    }

    #[test]
    fn origin_share_is_split_between_fetching_peers() {
        let leaves = cids(64);
        let x = origin_picks("x", "y", &leaves, 0);
        let y = origin_picks("y", "x", &leaves, 0);
        assert!(x.is_disjoint(&y));
        assert_eq!(x.len() + y.len(), leaves.len());
        assert!(!x.is_empty() && !y.is_empty());
    }

    #[test]
    fn quiet_session_takes_over_the_peer_share() {
        let key = ContentId::digest(b"key");
        let leaves = cids(64);
        let cfg = ExchangeConfig {
            origin_window: 1000,
            ..ExchangeConfig::default()
        };
        let wait = cfg.takeover_after;
        let mut s = FetchSession::new(key, Some("origin".into()), 0, cfg);
        s.set_local("x");
        s.add_providers(["y".to_string()]);
        s.on_block("y", &key, 100, 0);
        s.root = Some(key);
        s.want(leaves.iter().copied());
        let deny_all = |s: &mut FetchSession, now| {
            for c in &leaves {
                s.on_dont_have("y", c, now);
            }
        };
        deny_all(&mut s, 0);
        let own: Vec<ContentId> = s.schedule(0).into_iter().flat_map(|(_, cs)| cs).collect();
        assert!(own.len() < leaves.len());
        for c in &own {
            s.on_block("origin", c, 100, 10);
        }
        deny_all(&mut s, 20);
        assert!(s.schedule(20).is_empty());
        deny_all(&mut s, 10 + wait);
        let rest: usize = s.schedule(10 + wait).into_iter().map(|(_, cs)| cs.len()).sum();
        assert_eq!(rest + own.len(), leaves.len());
    }

    #[test]
    fn equal_providers_split_evenly() {
        let mut s = session_with_leaves(8, &["a", "b"], None);
        let mut now = 0;
        let mut served: HashMap<String, usize> = HashMap::new();
        while !s.is_done() {
            let batches = s.schedule(now);
            assert!(!batches.is_empty());
            now += 1000;
            for (p, cs) in batches {
                for c in cs {
                    s.on_block(&p, &c, 1000, now);
                    *served.entry(p.clone()).or_default() += 1;
                }
            }
        }
        assert!(served.values().all(|n| (3..=5).contains(n)), "{served:?}");
    }

    #[test]
    fn origin_only_after_site_denials() {
        let mut s = session_with_leaves(2, &["a"], Some("origin"));
        let b = s.schedule(0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].0, "a");
        for c in &b[0].1 {
            s.on_dont_have("a", c, 1);
        }
        let b = s.schedule(2);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].0, "origin");
        assert_eq!(b[0].1.len(), 2);
    }

    #[test]
    fn no_site_peers_uses_origin() {
        let key = ContentId::digest(b"k");
        let mut s = FetchSession::new(key, Some("origin".into()), 0, ExchangeConfig::default());
        let b = s.schedule(0);
        assert_eq!(b, vec![("origin".to_string(), vec![key])]);
        s.on_dont_have("origin", &key, 1);
        assert!(s.is_not_found());
    }

    #[test]
    fn timeout_reassigns() {
        let mut s = session_with_leaves(40, &["a", "b"], None);
        let first: HashMap<ContentId, String> = s
            .schedule(0)
            .into_iter()
            .flat_map(|(p, cs)| cs.into_iter().map(move |c| (c, p.clone())))
            .collect();
        assert_eq!(first.len(), 4);
        assert!(s.schedule(1).is_empty());
        assert_eq!(s.on_tick(secs(10)), 4);
        let again: HashMap<ContentId, String> = s
            .schedule(secs(10))
            .into_iter()
            .flat_map(|(p, cs)| cs.into_iter().map(move |c| (c, p.clone())))
            .collect();
        for (c, p) in &again {
            if let Some(old) = first.get(c) {
                assert_ne!(old, p, "timed-out block went back to the same peer");
            }
        }
    }

    #[test]
    fn endgame_duplicates_last_block() {
        let mut s = session_with_leaves(1, &["a", "b"], None);
        let b = s.schedule(0);
        let total: usize = b.iter().map(|(_, c)| c.len()).sum();
        assert_eq!(total, 2, "last block is requested from both peers");
    }

    #[test]
    fn stall_detection() {
        let s = session_with_leaves(1, &["a"], None);
        assert!(!s.is_stalled(secs(29)));
        assert!(s.is_stalled(secs(30)));
    }

    #[test]
    fn upload_queue_round_robin() {
        let mut q = UploadQueue::new(100);
        let c = cids(9);
        q.push("a", c[0..3].to_vec());
        q.push("b", c[3..6].to_vec());
        q.push("c", c[6..9].to_vec());
        let order: Vec<String> = std::iter::from_fn(|| q.pop()).map(|(p, _)| p).collect();
        assert_eq!(order, ["a", "b", "c", "a", "b", "c", "a", "b", "c"]);
    }
}
