//! Site-local provider discovery: k-bucket routing table, provider record
//! storage with expiry, and the iterative lookup state machine.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::cid::ContentId;
use crate::peer::{bucket_index, cmp_distance, PeerId, PeerInfo};
use crate::time::Timestamp;

pub const K: usize = 20;
pub const ALPHA: usize = 3;
/// Record holders per identifier.
pub const REPLICATION: usize = 3;

#[derive(Debug, Clone)]
pub struct RoutingTable {
    me: PeerId,
    k: usize,
    /// Index 0 is the farthest bucket. Each bucket is ordered oldest first.
    buckets: Vec<VecDeque<PeerInfo>>,
}

impl RoutingTable {
    pub fn new(me: PeerId) -> Self {
        Self::with_k(me, K)
    }

    pub fn with_k(me: PeerId, k: usize) -> Self {
        RoutingTable {
            me,
            k,
            buckets: vec![VecDeque::new(); 256],
        }
    }

    pub fn me(&self) -> PeerId {
        self.me
    }

    /// Inserts or refreshes `peer`. A full bucket keeps its oldest entries.
    pub fn observe(&mut self, peer: PeerInfo) -> bool {
        let Some(i) = bucket_index(self.me.as_bytes(), peer.id.as_bytes()) else {
            return false;
        };
        let bucket = &mut self.buckets[i];
        if let Some(pos) = bucket.iter().position(|p| p.id == peer.id) {
            let existing = bucket.remove(pos).unwrap();
            bucket.push_back(PeerInfo {
                addr: peer.addr,
                ..existing
            });
            return true;
        }
        if bucket.len() >= self.k {
            return false;
        }
        bucket.push_back(peer);
        true
    }

    pub fn remove(&mut self, id: &PeerId) {
        if let Some(i) = bucket_index(self.me.as_bytes(), id.as_bytes()) {
            self.buckets[i].retain(|p| p.id != *id);
        }
    }

    pub fn contains(&self, id: &PeerId) -> bool {
        match bucket_index(self.me.as_bytes(), id.as_bytes()) {
            Some(i) => self.buckets[i].iter().any(|p| p.id == *id),
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn peers(&self) -> Vec<PeerInfo> {
        let mut v: Vec<PeerInfo> = self.buckets.iter().flatten().cloned().collect();
        v.sort();
        v
    }

    /// Up to `n` known peers closest to `target`, self excluded.
    pub fn closest(&self, target: &[u8; 32], n: usize) -> Vec<PeerInfo> {
        let mut all: Vec<PeerInfo> = self.buckets.iter().flatten().cloned().collect();
        all.sort_by(|a, b| cmp_distance(target, a.id.as_bytes(), b.id.as_bytes()));
        all.truncate(n);
        all
    }

    pub fn bucket_sizes(&self) -> Vec<usize> {
        self.buckets.iter().map(|b| b.len()).collect()
    }
}

/// Provider records this node holds on behalf of the site.
#[derive(Debug, Clone, Default)]
pub struct ProviderStore {
    records: HashMap<ContentId, BTreeMap<String, Timestamp>>,
}

impl ProviderStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, cid: ContentId, addr: &str, expires_at: Timestamp) {
        let e = self
            .records
            .entry(cid)
            .or_default()
            .entry(addr.to_string())
            .or_insert(expires_at);
        *e = (*e).max(expires_at);
    }

    /// Live providers of `cid` at `now`.
    pub fn get(&self, cid: &ContentId, now: Timestamp) -> Vec<(String, Timestamp)> {
        self.records
            .get(cid)
            .map(|m| {
                m.iter()
                    .filter(|(_, exp)| **exp > now)
                    .map(|(a, e)| (a.clone(), *e))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn prune(&mut self, now: Timestamp) {
        self.records.retain(|_, m| {
            m.retain(|_, exp| *exp > now);
            !m.is_empty()
        });
    }

    pub fn len(&self) -> usize {
        self.records.values().map(|m| m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Iterative provider lookup for one identifier.
///
/// Queries go to the `ALPHA` closest unqueried peers; each answer can add
/// providers and closer contacts. The lookup finishes when a round yields
/// providers or no candidates remain.
#[derive(Debug, Clone)]
pub struct Lookup {
    pub cid: ContentId,
    me: PeerId,
    candidates: Vec<PeerInfo>,
    queried: HashSet<PeerId>,
    pending: HashMap<String, Timestamp>,
    providers: BTreeMap<String, PeerId>,
    fallback: Option<PeerInfo>,
    done: bool,
}

impl Lookup {
    pub fn new(cid: ContentId, me: PeerId, seed: Vec<PeerInfo>) -> Self {
        let mut l = Lookup {
            cid,
            me,
            candidates: Vec::new(),
            queried: HashSet::new(),
            pending: HashMap::new(),
            providers: BTreeMap::new(),
            fallback: None,
            done: false,
        };
        for p in seed {
            l.add_candidate(p);
        }
        l
    }

    fn add_candidate(&mut self, p: PeerInfo) {
        if p.id == self.me || self.queried.contains(&p.id) {
            return;
        }
        if self.candidates.iter().any(|c| c.id == p.id) {
            return;
        }
        self.candidates.push(p);
        let target = *self.cid.as_bytes();
        self.candidates
            .sort_by(|a, b| cmp_distance(&target, a.id.as_bytes(), b.id.as_bytes()));
    }

    /// Peer asked once, last, when the candidates yield no provider.
    pub fn with_fallback(mut self, peer: PeerInfo) -> Self {
        if peer.id != self.me {
            self.fallback = Some(peer);
        }
        self
    }

    /// Adds providers already known locally.
    pub fn add_providers(&mut self, addrs: impl IntoIterator<Item = String>) {
        for a in addrs {
            let id = PeerId::from_addr(&a);
            if id != self.me {
                self.providers.insert(a, id);
            }
        }
    }

    /// Next peers to query, with the deadline to record for each.
    pub fn next_queries(&mut self, deadline: Timestamp) -> Vec<PeerInfo> {
        if self.done {
            return Vec::new();
        }
        let mut out = Vec::new();
        while self.pending.len() < ALPHA && !self.candidates.is_empty() {
            let p = self.candidates.remove(0);
            self.queried.insert(p.id);
            self.pending.insert(p.addr.clone(), deadline);
            out.push(p);
        }
        if out.is_empty() && self.pending.is_empty() && self.providers.is_empty() {
            if let Some(p) = self.fallback.take() {
                self.queried.insert(p.id);
                self.pending.insert(p.addr.clone(), deadline);
                out.push(p);
            }
        }
        if out.is_empty() && self.pending.is_empty() {
            self.done = true;
        }
        out
    }

    /// Feeds an answer from `from`. Zero-TTL entries are contact hints.
    pub fn on_response(&mut self, from: &str, entries: &[(String, u32)]) {
        if self.pending.remove(from).is_none() {
            return;
        }
        for (addr, ttl) in entries {
            if *ttl > 0 {
                self.add_providers([addr.clone()]);
            } else {
                self.add_candidate(PeerInfo::new(addr.clone()));
            }
        }
        self.check_round();
    }

    /// Expires queries past their deadline.
    pub fn on_tick(&mut self, now: Timestamp) {
        let before = self.pending.len();
        self.pending.retain(|_, d| *d > now);
        if self.pending.len() != before {
            self.check_round();
        }
    }

    /// Counts `addr` as failed, for example when it is unreachable.
    pub fn on_failure(&mut self, addr: &str) {
        if self.pending.remove(addr).is_some() {
            self.check_round();
        }
    }

    fn check_round(&mut self) {
        let exhausted = self.candidates.is_empty() && self.fallback.is_none();
        if self.pending.is_empty() && (!self.providers.is_empty() || exhausted) {
            self.done = true;
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_waiting_on(&self, addr: &str) -> bool {
        self.pending.contains_key(addr)
    }

    /// Providers found so far, ordered by XOR distance to `querier`.
    pub fn providers(&self, querier: &PeerId) -> Vec<String> {
        let mut v: Vec<(&String, &PeerId)> = self.providers.iter().collect();
        v.sort_by(|a, b| cmp_distance(querier.as_bytes(), a.1.as_bytes(), b.1.as_bytes()));
        v.into_iter().map(|(a, _)| a.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(n: u32) -> PeerInfo {
        PeerInfo::new(format!("node{n}"))
    }

    #[test]
    fn routing_table_has_no_duplicates_and_refreshes() {
        let me = PeerId::from_addr("me");
        let mut rt = RoutingTable::new(me);
        for n in 0..10 {
            rt.observe(info(n));
        }
        rt.observe(info(3));
        assert_eq!(rt.len(), 10);
        assert!(!rt.observe(PeerInfo::new("me")));
        let target = *ContentId::digest(b"t").as_bytes();
        let c = rt.closest(&target, 3);
        assert_eq!(c.len(), 3);
        let mut all = rt.peers();
        all.sort_by(|a, b| cmp_distance(&target, a.id.as_bytes(), b.id.as_bytes()));
        assert_eq!(c, all[..3].to_vec());
    }

    #[test]
    fn full_bucket_keeps_oldest() {
        let me = PeerId::from_bytes([0; 32]);
        let mut rt = RoutingTable::with_k(me, 2);
        // All these share bucket 0 when their top bit is set.
        let far: Vec<PeerInfo> = (0..200)
            .map(info)
            .filter(|p| p.id.as_bytes()[0] & 0x80 != 0)
            .take(3)
            .collect();
        assert!(rt.observe(far[0].clone()));
        assert!(rt.observe(far[1].clone()));
        assert!(!rt.observe(far[2].clone()));
        assert!(rt.contains(&far[0].id) && !rt.contains(&far[2].id));
    }

    #[test]
    fn provider_records_expire() {
        let mut ps = ProviderStore::new();
        let c = ContentId::digest(b"c");
        ps.add(c, "node1", 30_000_000);
        assert_eq!(ps.get(&c, 29_999_999).len(), 1);
        assert!(ps.get(&c, 30_000_000).is_empty());
        ps.prune(30_000_000);
        assert!(ps.is_empty());
    }

    #[test]
    fn lookup_moves_on_after_empty_round() {
        let me = PeerId::from_addr("me");
        let cid = ContentId::digest(b"x");
        let seed: Vec<PeerInfo> = (0..6).map(info).collect();
        let mut l = Lookup::new(cid, me, seed);
        let first = l.next_queries(100);
        assert_eq!(first.len(), ALPHA);
        for p in &first {
            l.on_response(&p.addr, &[(p.addr.clone(), 0)]);
        }
        assert!(!l.is_done());
        let second = l.next_queries(200);
        assert_eq!(second.len(), 3);
        l.on_response(&second[0].addr, &[("node9".into(), 30)]);
        l.on_tick(201);
        assert!(l.is_done());
        assert_eq!(l.providers(&me), vec!["node9".to_string()]);
    }

    #[test]
    fn fallback_is_asked_only_after_site_comes_up_empty() {
        let me = PeerId::from_addr("me");
        let cid = ContentId::digest(b"y");
        let mut l = Lookup::new(cid, me, vec![info(1)]).with_fallback(info(99));
        let q = l.next_queries(10);
        assert_eq!(q, vec![info(1)]);
        l.on_response("node1", &[]);
        assert!(!l.is_done());
        let q = l.next_queries(20);
        assert_eq!(q, vec![info(99)]);
        l.on_response("node99", &[("node99".into(), 30)]);
        assert!(l.is_done());
        assert_eq!(l.providers(&me), vec!["node99".to_string()]);
    }
}
