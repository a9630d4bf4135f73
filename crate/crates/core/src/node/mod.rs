//! The registry node as a sans-IO state machine.
//!
//! A [`Node`] never touches sockets or clocks. Its owner feeds it peer
//! messages, timer expirations and HTTP requests, and provides an [`Env`]
//! through which the node sends messages, arms timers and answers requests.
//! The daemon drives it over TCP and wall-clock time; the simulator drives
//! it in virtual time.

mod http;
mod replicate;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use log::{debug, info, warn};

use crate::cas::{chunk_bytes, DagNode, Store, VerifiedBlock};
use crate::cid::ContentId;
use crate::dht::{Lookup, ProviderStore, RoutingTable, K, REPLICATION};
use crate::exchange::{ExchangeConfig, FetchFailure, FetchSession, UploadQueue};
use crate::gateway::HttpResponse;
use crate::image::ImageManifest;
use crate::peer::{PeerId, PeerInfo};
use crate::replication::{Factor, PinsetState, Replica};
use crate::time::{millis, secs, Micros, Timestamp};
use crate::wire::{Message, ProviderEntry};

pub use http::http_error_for;

pub type RequestId = u64;
type JobId = u64;

/// Side effects available to a node.
pub trait Env {
    fn now(&self) -> Timestamp;
    fn send(&mut self, to: &str, msg: Message);
    fn set_timer(&mut self, delay: Micros, timer: Timer);
    fn respond(&mut self, req: RequestId, resp: HttpResponse);
    fn random(&mut self) -> u64;
    /// Time until the node's outgoing link drains what is already queued.
    fn egress_backlog(&self) -> Micros {
        0
    }
    fn emit(&mut self, _event: NodeEvent) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Tick,
    Announce,
    Gossip,
    IngestDone,
    ServeDone,
    UploadPump,
    Retry(JobId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    FetchFinished {
        digest: ContentId,
        ok: bool,
        bytes_origin: u64,
        bytes_peers: u64,
        started: Timestamp,
        finished: Timestamp,
    },
    ImagePinned {
        manifest: ContentId,
    },
    /// A peer sent bytes that did not match the identifier they claimed.
    RejectedBlock {
        from: String,
        cid: ContentId,
    },
}

/// Per-block processing time of the agent, charged serially per node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentCosts {
    pub ingest_per_block: Micros,
    pub serve_per_block: Micros,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub addr: String,
    /// Static fallback source, outside the site DHT.
    pub origin: Option<String>,
    /// Site membership for replication and DHT bootstrap.
    pub members: Vec<String>,
    /// Fetch missing content from peers and the origin.
    pub p2p: bool,
    /// Answer WANT requests.
    pub serve_blocks: bool,
    pub replication: bool,
    pub factor: Factor,
    pub exchange: ExchangeConfig,
    pub provide_ttl: Micros,
    pub reannounce_every: Micros,
    pub gossip_every: Micros,
    pub tick_every: Micros,
    pub lookup_timeout: Micros,
    pub provider_refresh: Micros,
    /// Waits between provider lookups that found nobody.
    pub retry_schedule: Vec<Micros>,
    pub costs: AgentCosts,
    /// Uploads pause while the egress link is this far behind.
    pub upload_backlog: Micros,
}

impl NodeConfig {
    pub fn new(addr: impl Into<String>) -> Self {
        NodeConfig {
            addr: addr.into(),
            origin: None,
            members: Vec::new(),
            p2p: true,
            serve_blocks: true,
            replication: true,
            factor: Factor::All,
            exchange: ExchangeConfig::default(),
            provide_ttl: secs(30),
            reannounce_every: secs(10),
            gossip_every: secs(5),
            tick_every: millis(100),
            lookup_timeout: secs(2),
            provider_refresh: secs(1),
            retry_schedule: vec![secs(1), secs(2), secs(4)],
            costs: AgentCosts::default(),
            upload_backlog: millis(10),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeMetrics {
    pub bytes_from_origin: u64,
    pub bytes_from_peers: u64,
    pub blocks_served: u64,
    pub bytes_served: u64,
    pub dont_have_sent: u64,
    pub rejected_blocks: u64,
    pub fetches_ok: u64,
    pub fetches_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum FetchResult {
    Ok(ContentId),
    Failed(FetchFailure),
}

struct Fetch {
    session: FetchSession,
    waiters: Vec<JobId>,
    retries: usize,
    next_retry: Option<Timestamp>,
    last_refresh: Timestamp,
}

struct Ingest {
    from: String,
    wanted: ContentId,
    block: VerifiedBlock,
}

#[derive(Debug, Clone)]
pub(crate) enum Job {
    ResolveTag {
        req: RequestId,
        head: bool,
        name: String,
        tag: String,
        attempt: usize,
    },
    Manifest {
        req: RequestId,
        digest: ContentId,
    },
    Blob {
        req: RequestId,
        digest: ContentId,
    },
    Head {
        req: RequestId,
        digest: ContentId,
        manifest: bool,
    },
    Replicate {
        manifest: ContentId,
        remaining: Option<Vec<ContentId>>,
    },
}

pub struct Node {
    cfg: NodeConfig,
    me: PeerInfo,
    store: Arc<Store>,
    routing: RoutingTable,
    providers: ProviderStore,
    replica: Replica,
    fetches: BTreeMap<ContentId, Fetch>,
    lookups: BTreeMap<ContentId, Lookup>,
    lookup_waiters: HashMap<ContentId, Vec<JobId>>,
    jobs: BTreeMap<JobId, Job>,
    next_job: JobId,
    uploads: UploadQueue,
    serving: Option<(String, ContentId, bytes::Bytes)>,
    pump_armed: bool,
    ingest: VecDeque<Ingest>,
    ingest_busy: bool,
    pending_announce: BTreeSet<ContentId>,
    known_sizes: HashMap<ContentId, u64>,
    manifests: BTreeMap<ContentId, ImageManifest>,
    images_pinned: BTreeSet<ContentId>,
    replicating: BTreeSet<ContentId>,
    open_uploads: HashSet<String>,
    metrics: NodeMetrics,
    tick_armed: bool,
}

impl Node {
    pub fn new(cfg: NodeConfig, store: Arc<Store>) -> Self {
        let me = PeerInfo::new(cfg.addr.clone());
        let mut routing = RoutingTable::new(me.id);
        let mut member_ids = Vec::new();
        for m in &cfg.members {
            let p = PeerInfo::new(m.clone());
            member_ids.push(p.id);
            if Some(m) != cfg.origin.as_ref() {
                routing.observe(p);
            }
        }
        let replica = Replica::new(me.id, member_ids);
        Node {
            routing,
            replica,
            me,
            store,
            providers: ProviderStore::new(),
            fetches: BTreeMap::new(),
            lookups: BTreeMap::new(),
            lookup_waiters: HashMap::new(),
            jobs: BTreeMap::new(),
            next_job: 1,
            uploads: UploadQueue::new(4096),
            serving: None,
            pump_armed: false,
            ingest: VecDeque::new(),
            ingest_busy: false,
            pending_announce: BTreeSet::new(),
            known_sizes: HashMap::new(),
            manifests: BTreeMap::new(),
            images_pinned: BTreeSet::new(),
            replicating: BTreeSet::new(),
            open_uploads: HashSet::new(),
            metrics: NodeMetrics::default(),
            tick_armed: false,
            cfg,
        }
    }

    pub fn addr(&self) -> &str {
        &self.me.addr
    }

    pub fn id(&self) -> PeerId {
        self.me.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn metrics(&self) -> NodeMetrics {
        self.metrics
    }

    pub fn pinset(&self) -> &PinsetState {
        self.replica.state()
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    pub fn pinned_images(&self) -> Vec<ContentId> {
        self.images_pinned.iter().copied().collect()
    }

    pub fn active_fetches(&self) -> usize {
        self.fetches.len()
    }

    pub fn set_serve_blocks(&mut self, on: bool) {
        self.cfg.serve_blocks = on;
    }

    /// Arms periodic timers, greets members and announces held content.
    pub fn start(&mut self, env: &mut dyn Env) {
        for m in self.cfg.members.clone() {
            if m != self.me.addr {
                env.send(
                    &m,
                    Message::Hello {
                        peer: self.me.id,
                        addr: self.me.addr.clone(),
                    },
                );
            }
        }
        self.queue_all_held();
        self.restore_pinned_images();
        env.set_timer(self.cfg.reannounce_every, Timer::Announce);
        if self.cfg.replication && self.gossip_targets().next().is_some() {
            env.set_timer(self.cfg.gossip_every, Timer::Gossip);
        }
        self.arm_tick(env);
    }

    fn arm_tick(&mut self, env: &mut dyn Env) {
        if !self.tick_armed {
            self.tick_armed = true;
            env.set_timer(self.cfg.tick_every, Timer::Tick);
        }
    }

    fn new_job(&mut self, job: Job) -> JobId {
        let id = self.next_job;
        self.next_job += 1;
        self.jobs.insert(id, job);
        id
    }

    fn shuffle<T>(env: &mut dyn Env, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = (env.random() % (i as u64 + 1)) as usize;
            v.swap(i, j);
        }
    }

    // ---- timers -------------------------------------------------------

    pub fn on_timer(&mut self, env: &mut dyn Env, timer: Timer) {
        match timer {
            Timer::Tick => {
                self.tick_armed = false;
                self.on_tick(env);
            }
            Timer::Announce => {
                self.providers.prune(env.now());
                self.queue_all_held();
                self.flush_announces(env);
                env.set_timer(self.cfg.reannounce_every, Timer::Announce);
            }
            Timer::Gossip => {
                self.gossip(env);
                self.reconcile_replication(env);
                env.set_timer(self.cfg.gossip_every, Timer::Gossip);
            }
            Timer::IngestDone => {
                self.ingest_busy = false;
                if let Some(item) = self.ingest.pop_front() {
                    self.finish_ingest(env, item);
                }
                self.start_ingest(env);
            }
            Timer::ServeDone => {
                if let Some((peer, cid, data)) = self.serving.take() {
                    self.send_block(env, &peer, cid, data);
                }
                self.pump_uploads(env);
            }
            Timer::UploadPump => {
                self.pump_armed = false;
                self.pump_uploads(env);
            }
            Timer::Retry(job) => self.on_retry(env, job),
        }
    }

    fn on_tick(&mut self, env: &mut dyn Env) {
        let now = env.now();
        let keys: Vec<ContentId> = self.lookups.keys().copied().collect();
        for k in keys {
            if let Some(l) = self.lookups.get_mut(&k) {
                l.on_tick(now);
            }
            self.advance_lookup(env, k);
        }
        let keys: Vec<ContentId> = self.fetches.keys().copied().collect();
        for k in keys {
            let Some(f) = self.fetches.get_mut(&k) else { continue };
            f.session.on_tick(now);
            if now >= f.last_refresh + self.cfg.provider_refresh && self.cfg.p2p {
                f.last_refresh = now;
                self.start_lookup(env, k, None);
            }
            self.drive(env, k);
        }
        self.flush_announces(env);
        if !self.fetches.is_empty() || !self.lookups.is_empty() || !self.pending_announce.is_empty() {
            self.arm_tick(env);
        }
    }

    // ---- messages -----------------------------------------------------

    pub fn on_message(&mut self, env: &mut dyn Env, from: &str, msg: Message) {
        match msg {
            Message::Hello { peer, addr } => {
                if peer == PeerId::from_addr(&addr) {
                    self.observe(&addr);
                } else {
                    warn!("HELLO from {from} with mismatched id for {addr}");
                }
            }
            Message::Want { cids } => {
                if !self.cfg.serve_blocks {
                    return;
                }
                self.uploads.push(from, cids);
                self.pump_uploads(env);
            }
            Message::Block { cid, data } => self.on_block(env, from, cid, data),
            Message::DontHave { cid } => {
                let now = env.now();
                let keys: Vec<ContentId> = self
                    .fetches
                    .iter()
                    .filter(|(_, f)| f.session.is_wanted(&cid))
                    .map(|(k, _)| *k)
                    .collect();
                for k in keys {
                    if let Some(f) = self.fetches.get_mut(&k) {
                        f.session.on_dont_have(from, &cid, now);
                    }
                    self.drive(env, k);
                }
            }
            Message::Provide { records } => {
                self.observe(from);
                let now = env.now();
                for r in records {
                    if r.ttl_secs > 0 {
                        self.providers
                            .add(r.cid, &r.addr, now + secs(r.ttl_secs as u64));
                    } else {
                        self.on_fetch_intent(env, r.cid, &r.addr);
                    }
                }
            }
            Message::FindProviders { cid } => {
                self.observe(from);
                let reply = self.providers_reply(env.now(), cid);
                env.send(from, Message::Providers { records: reply });
            }
            Message::Providers { records } => {
                let Some(cid) = records.first().map(|r| r.cid) else { return };
                let entries: Vec<(String, u32)> = records
                    .iter()
                    .filter(|r| r.cid == cid)
                    .map(|r| (r.addr.clone(), r.ttl_secs))
                    .collect();
                for (a, ttl) in &entries {
                    if *ttl == 0 {
                        self.observe(a);
                    }
                }
                if let Some(l) = self.lookups.get_mut(&cid) {
                    l.on_response(from, &entries);
                    self.advance_lookup(env, cid);
                }
            }
            Message::PinsetSync(state) => self.on_pinset(env, from, state),
        }
    }

    /// The transport could not deliver `msg` to `to`.
    pub fn on_send_failed(&mut self, env: &mut dyn Env, to: &str, msg: &Message) {
        let now = env.now();
        match msg {
            Message::Want { .. } => {
                let keys: Vec<ContentId> = self.fetches.keys().copied().collect();
                for k in keys {
                    if let Some(f) = self.fetches.get_mut(&k) {
                        f.session.on_unreachable(to, now);
                    }
                    self.drive(env, k);
                }
            }
            Message::FindProviders { cid } => {
                if let Some(l) = self.lookups.get_mut(cid) {
                    l.on_failure(to);
                }
                self.advance_lookup(env, *cid);
            }
            _ => debug!("dropped {:?} to {to}", msg.type_byte()),
        }
    }

    fn observe(&mut self, addr: &str) {
        if Some(addr) != self.cfg.origin.as_deref() && addr != self.me.addr {
            self.routing.observe(PeerInfo::new(addr.to_string()));
        }
    }

    fn holds(&self, cid: &ContentId) -> bool {
        self.store.has(cid) || self.store.resolve_digest(cid).is_some()
    }

    fn providers_reply(&self, now: Timestamp, cid: ContentId) -> Vec<ProviderEntry> {
        let mut out: Vec<ProviderEntry> = self
            .providers
            .get(&cid, now)
            .into_iter()
            .map(|(addr, exp)| ProviderEntry {
                cid,
                addr,
                ttl_secs: ((exp - now) / secs(1)).max(1) as u32,
            })
            .collect();
        let ttl_self = if self.holds(&cid) {
            (self.cfg.provide_ttl / secs(1)) as u32
        } else {
            0
        };
        if !out.iter().any(|e| e.addr == self.me.addr) {
            out.push(ProviderEntry {
                cid,
                addr: self.me.addr.clone(),
                ttl_secs: ttl_self,
            });
        }
        for p in self.routing.closest(cid.as_bytes(), K) {
            if !out.iter().any(|e| e.addr == p.addr) {
                out.push(ProviderEntry {
                    cid,
                    addr: p.addr,
                    ttl_secs: 0,
                });
            }
        }
        out
    }

    // ---- serving ------------------------------------------------------

    /// Bytes to answer a WANT for `cid`: the block itself, or the root node
    /// when `cid` is a registry digest.
    fn block_for(&self, cid: &ContentId) -> Option<bytes::Bytes> {
        if self.store.has(cid) {
            if let Ok(b) = self.store.get_block(cid) {
                return Some(b);
            }
        }
        let root = self.store.resolve_digest(cid)?;
        self.store.get_block(&root).ok()
    }

    fn pump_uploads(&mut self, env: &mut dyn Env) {
        while self.serving.is_none() {
            let backlog = env.egress_backlog();
            if backlog > self.cfg.upload_backlog {
                if !self.pump_armed && !self.uploads.is_empty() {
                    self.pump_armed = true;
                    env.set_timer(backlog - self.cfg.upload_backlog / 2, Timer::UploadPump);
                }
                return;
            }
            let Some((peer, cid)) = self.uploads.pop() else { return };
            match self.block_for(&cid) {
                Some(data) => {
                    if self.cfg.costs.serve_per_block > 0 {
                        self.serving = Some((peer, cid, data));
                        env.set_timer(self.cfg.costs.serve_per_block, Timer::ServeDone);
                        return;
                    }
                    self.send_block(env, &peer, cid, data);
                }
                None => {
                    self.metrics.dont_have_sent += 1;
                    env.send(&peer, Message::DontHave { cid });
                }
            }
        }
    }

    fn send_block(&mut self, env: &mut dyn Env, peer: &str, cid: ContentId, data: bytes::Bytes) {
        self.metrics.blocks_served += 1;
        self.metrics.bytes_served += data.len() as u64;
        env.send(peer, Message::Block { cid, data });
    }

    // ---- fetching -----------------------------------------------------

    /// Fetches the blob whose registry digest is `digest` and notifies `job`.
    pub(crate) fn fetch(&mut self, env: &mut dyn Env, digest: ContentId, job: Option<JobId>) {
        if crate::image::blob_complete(&self.store, &digest) {
            if let Some(j) = job {
                self.resume_job(env, j, FetchResult::Ok(digest));
            }
            return;
        }
        if let Some(f) = self.fetches.get_mut(&digest) {
            f.waiters.extend(job);
            return;
        }
        let now = env.now();
        let mut session = FetchSession::new(
            digest,
            self.cfg.origin.clone(),
            now,
            self.cfg.exchange.clone(),
        );
        session.set_local(&self.me.addr);
        let known: Vec<String> = self
            .providers
            .get(&digest, now)
            .into_iter()
            .map(|(a, _)| a)
            .filter(|a| *a != self.me.addr)
            .collect();
        session.add_providers(known);
        self.fetches.insert(
            digest,
            Fetch {
                session,
                waiters: job.into_iter().collect(),
                retries: 0,
                next_retry: None,
                last_refresh: now,
            },
        );
        if self.cfg.p2p {
            for m in self.cfg.members.clone() {
                if m != self.me.addr {
                    self.send_intent(env, &m, digest);
                }
            }
        }
        self.start_lookup(env, digest, None);
        self.drive(env, digest);
        self.arm_tick(env);
    }

    /// Tells `to` that this node is fetching `digest` right now: a PROVIDE
    /// record with a zero TTL, which is never stored.
    fn send_intent(&self, env: &mut dyn Env, to: &str, digest: ContentId) {
        env.send(
            to,
            Message::Provide {
                records: vec![ProviderEntry {
                    cid: digest,
                    addr: self.me.addr.clone(),
                    ttl_secs: 0,
                }],
            },
        );
    }

    /// A peer fetching the same blob joins the session, so that origin
    /// requests are split with it from the start.
    fn on_fetch_intent(&mut self, env: &mut dyn Env, digest: ContentId, addr: &str) {
        if addr == self.me.addr || Some(addr) == self.cfg.origin.as_deref() {
            return;
        }
        let Some(f) = self.fetches.get_mut(&digest) else { return };
        if f.session.has_peer(addr) {
            return;
        }
        f.session.add_providers([addr.to_string()]);
        self.send_intent(env, addr, digest);
        self.drive(env, digest);
    }

    /// Sends whatever requests the session can make and settles it when
    /// finished or hopeless.
    fn drive(&mut self, env: &mut dyn Env, key: ContentId) {
        let now = env.now();
        let Some(f) = self.fetches.get_mut(&key) else { return };
        if f.session.is_done() {
            self.complete_fetch(env, key);
            return;
        }
        if f.session.is_not_found() {
            self.fail_fetch(env, key, FetchFailure::NotFound);
            return;
        }
        if f.session.is_stalled(now) {
            let missing = f.session.missing();
            self.fail_fetch(env, key, FetchFailure::Incomplete(missing));
            return;
        }
        for (peer, cids) in f.session.schedule(now) {
            env.send(&peer, Message::Want { cids });
        }
        let f = self.fetches.get_mut(&key).unwrap();
        if !f.session.has_live_source(now) && !self.lookups.contains_key(&key) {
            match f.next_retry {
                Some(t) if t <= now => {
                    f.next_retry = None;
                    f.last_refresh = now;
                    self.start_lookup(env, key, None);
                }
                Some(_) => {}
                None if f.retries < self.cfg.retry_schedule.len() => {
                    f.next_retry = Some(now + self.cfg.retry_schedule[f.retries]);
                    f.retries += 1;
                }
                None => {
                    let missing = f.session.missing();
                    self.fail_fetch(env, key, FetchFailure::Incomplete(missing));
                }
            }
        }
    }

    fn on_block(&mut self, env: &mut dyn Env, from: &str, cid: ContentId, data: bytes::Bytes) {
        let wanting: Vec<ContentId> = self
            .fetches
            .iter()
            .filter(|(_, f)| f.session.is_wanted(&cid))
            .map(|(k, _)| *k)
            .collect();
        if wanting.is_empty() || self.ingest.iter().any(|i| i.wanted == cid) {
            return;
        }
        let block = match VerifiedBlock::verify(cid, data.clone()) {
            Some(b) => Some(b),
            None => {
                // A registry digest may be answered with the root node it names.
                let is_key = wanting.iter().any(|k| {
                    *k == cid && self.fetches[k].session.root.is_none()
                });
                match DagNode::decode(&data) {
                    Ok(node) if is_key && node.file_digest == Some(cid) => {
                        Some(VerifiedBlock::new(data))
                    }
                    _ => None,
                }
            }
        };
        let Some(block) = block else {
            warn!("rejecting block {} from {from}: digest mismatch", cid.short());
            self.metrics.rejected_blocks += 1;
            env.emit(NodeEvent::RejectedBlock {
                from: from.to_string(),
                cid,
            });
            let now = env.now();
            for k in wanting {
                if let Some(f) = self.fetches.get_mut(&k) {
                    f.session.on_dont_have(from, &cid, now);
                }
                self.drive(env, k);
            }
            return;
        };
        let item = Ingest {
            from: from.to_string(),
            wanted: cid,
            block,
        };
        if self.cfg.costs.ingest_per_block == 0 {
            self.finish_ingest(env, item);
        } else {
            self.ingest.push_back(item);
            self.start_ingest(env);
        }
    }

    fn start_ingest(&mut self, env: &mut dyn Env) {
        if !self.ingest_busy && !self.ingest.is_empty() {
            self.ingest_busy = true;
            env.set_timer(self.cfg.costs.ingest_per_block, Timer::IngestDone);
        }
    }

    fn finish_ingest(&mut self, env: &mut dyn Env, item: Ingest) {
        let Ingest { from, wanted, block } = item;
        let len = block.data().len();
        if let Err(e) = self.store.put_verified(&block) {
            warn!("cannot store block {}: {e}", wanted.short());
            let keys: Vec<ContentId> = self
                .fetches
                .iter()
                .filter(|(_, f)| f.session.is_wanted(&wanted))
                .map(|(k, _)| *k)
                .collect();
            for k in keys {
                let missing = self.fetches[&k].session.missing();
                self.fail_fetch(env, k, FetchFailure::Incomplete(missing));
            }
            return;
        }
        if Some(from.as_str()) == self.cfg.origin.as_deref() {
            self.metrics.bytes_from_origin += len as u64;
        } else {
            self.metrics.bytes_from_peers += len as u64;
        }
        self.pending_announce.insert(block.cid());
        let now = env.now();
        let is_node = DagNode::looks_like_node(block.data());
        let keys: Vec<ContentId> = self
            .fetches
            .iter()
            .filter(|(_, f)| f.session.is_wanted(&wanted))
            .map(|(k, _)| *k)
            .collect();
        for k in keys {
            let f = self.fetches.get_mut(&k).unwrap();
            f.session.on_block(&from, &wanted, len, now);
            if k == wanted && f.session.root.is_none() {
                let root = if block.cid() == k {
                    // A single-leaf file arrives raw; rebuild its DAG locally.
                    match chunk_bytes(&self.store, block.data(), self.store.chunk_size()) {
                        Ok(c) => c.root,
                        Err(e) => {
                            warn!("cannot rebuild dag for {}: {e}", k.short());
                            let missing = vec![k];
                            self.fail_fetch(env, k, FetchFailure::Incomplete(missing));
                            continue;
                        }
                    }
                } else {
                    block.cid()
                };
                self.fetches.get_mut(&k).unwrap().session.root = Some(root);
                self.pending_announce.insert(k);
                self.expand(env, k);
            } else if is_node && f.session.root.is_some() {
                self.expand(env, k);
            }
            self.drive(env, k);
        }
    }

    /// Adds the DAG's currently known missing blocks to the session.
    fn expand(&mut self, env: &mut dyn Env, key: ContentId) {
        let Some(root) = self.fetches.get(&key).and_then(|f| f.session.root) else {
            return;
        };
        let mut missing = self.store.missing(&root);
        Self::shuffle(env, &mut missing);
        if let Some(f) = self.fetches.get_mut(&key) {
            f.session.want(missing);
        }
    }

    fn complete_fetch(&mut self, env: &mut dyn Env, key: ContentId) {
        let root = self.fetches[&key].session.root.expect("done session has a root");
        let missing = self.store.missing(&root);
        if !missing.is_empty() {
            self.fetches.get_mut(&key).unwrap().session.want(missing);
            return self.drive(env, key);
        }
        let verified = self
            .store
            .assemble_to(&root, &mut std::io::sink())
            .map_err(|e| e.to_string())
            .and_then(|_| self.store.register_root(&root).map_err(|e| e.to_string()));
        if let Err(e) = verified {
            warn!("fetched dag for {} failed verification: {e}", key.short());
            return self.fail_fetch(env, key, FetchFailure::Incomplete(vec![root]));
        }
        let f = self.fetches.remove(&key).unwrap();
        let s = &f.session;
        if let Some((_, size)) = self.store.root_info(&root) {
            self.known_sizes.insert(key, size);
        }
        self.pending_announce.insert(root);
        self.metrics.fetches_ok += 1;
        debug!(
            "{} fetched {} ({} B origin, {} B peers)",
            self.me.addr,
            key.short(),
            s.bytes_origin,
            s.bytes_peers
        );
        env.emit(NodeEvent::FetchFinished {
            digest: key,
            ok: true,
            bytes_origin: s.bytes_origin,
            bytes_peers: s.bytes_peers,
            started: s.started,
            finished: env.now(),
        });
        self.flush_announces(env);
        for j in f.waiters {
            self.resume_job(env, j, FetchResult::Ok(key));
        }
        self.check_auto_pin(env);
    }

    fn fail_fetch(&mut self, env: &mut dyn Env, key: ContentId, why: FetchFailure) {
        let Some(f) = self.fetches.remove(&key) else { return };
        info!("{} fetch of {} failed: {why:?}", self.me.addr, key.short());
        self.metrics.fetches_failed += 1;
        env.emit(NodeEvent::FetchFinished {
            digest: key,
            ok: false,
            bytes_origin: f.session.bytes_origin,
            bytes_peers: f.session.bytes_peers,
            started: f.session.started,
            finished: env.now(),
        });
        for j in f.waiters {
            self.resume_job(env, j, FetchResult::Failed(why.clone()));
        }
    }

    // ---- provider discovery -------------------------------------------

    fn start_lookup(&mut self, env: &mut dyn Env, cid: ContentId, waiter: Option<JobId>) {
        if let Some(j) = waiter {
            self.lookup_waiters.entry(cid).or_default().push(j);
        }
        if self.lookups.contains_key(&cid) {
            return;
        }
        let now = env.now();
        let mut lookup = Lookup::new(cid, self.me.id, self.routing.closest(cid.as_bytes(), K));
        lookup.add_providers(self.providers.get(&cid, now).into_iter().map(|(a, _)| a));
        if waiter.is_some() {
            if let Some(o) = &self.cfg.origin {
                lookup = lookup.with_fallback(PeerInfo::new(o.clone()));
            }
        }
        self.lookups.insert(cid, lookup);
        self.advance_lookup(env, cid);
        self.arm_tick(env);
    }

    fn advance_lookup(&mut self, env: &mut dyn Env, cid: ContentId) {
        let deadline = env.now() + self.cfg.lookup_timeout;
        let Some(l) = self.lookups.get_mut(&cid) else { return };
        for p in l.next_queries(deadline) {
            env.send(&p.addr, Message::FindProviders { cid });
        }
        if !l.is_done() {
            return;
        }
        let l = self.lookups.remove(&cid).unwrap();
        let found: Vec<String> = l
            .providers(&self.me.id)
            .into_iter()
            .filter(|a| *a != self.me.addr)
            .collect();
        if self.fetches.contains_key(&cid) {
            let site: Vec<String> = found
                .iter()
                .filter(|a| Some(a.as_str()) != self.cfg.origin.as_deref())
                .cloned()
                .collect();
            self.fetches
                .get_mut(&cid)
                .unwrap()
                .session
                .add_providers(site);
            self.drive(env, cid);
        }
        for j in self.lookup_waiters.remove(&cid).unwrap_or_default() {
            self.resume_head(env, j, !found.is_empty());
        }
    }

    // ---- announcements ------------------------------------------------

    fn queue_all_held(&mut self) {
        for c in self.store.block_ids() {
            self.pending_announce.insert(c);
        }
        for r in self.store.roots() {
            if let Some((d, _)) = self.store.root_info(&r) {
                self.pending_announce.insert(d);
            }
        }
    }

    /// Sends PROVIDE records for pending identifiers to their record holders.
    fn flush_announces(&mut self, env: &mut dyn Env) {
        if self.pending_announce.is_empty() {
            return;
        }
        let now = env.now();
        let ttl = (self.cfg.provide_ttl / secs(1)) as u32;
        let mut batches: BTreeMap<String, Vec<ProviderEntry>> = BTreeMap::new();
        for cid in std::mem::take(&mut self.pending_announce) {
            let mut holders = self.routing.closest(cid.as_bytes(), REPLICATION);
            holders.push(self.me.clone());
            holders.sort_by(|a, b| {
                crate::peer::cmp_distance(cid.as_bytes(), a.id.as_bytes(), b.id.as_bytes())
            });
            holders.truncate(REPLICATION);
            for h in holders {
                if h.id == self.me.id {
                    self.providers
                        .add(cid, &self.me.addr, now + self.cfg.provide_ttl);
                } else {
                    batches.entry(h.addr).or_default().push(ProviderEntry {
                        cid,
                        addr: self.me.addr.clone(),
                        ttl_secs: ttl,
                    });
                }
            }
        }
        for (holder, records) in batches {
            for chunk in records.chunks(4096) {
                env.send(
                    &holder,
                    Message::Provide {
                        records: chunk.to_vec(),
                    },
                );
            }
        }
    }

    // ---- jobs ---------------------------------------------------------

    fn resume_job(&mut self, env: &mut dyn Env, id: JobId, result: FetchResult) {
        let Some(job) = self.jobs.remove(&id) else { return };
        match job {
            Job::Manifest { req, digest } => self.finish_manifest_get(env, req, digest, result),
            Job::Blob { req, digest } => self.finish_blob_get(env, req, digest, result),
            Job::Replicate {
                manifest,
                remaining,
            } => self.continue_replication(env, manifest, remaining, result),
            other => {
                self.jobs.insert(id, other);
            }
        }
    }

    fn on_retry(&mut self, env: &mut dyn Env, id: JobId) {
        if let Some(Job::ResolveTag { .. }) = self.jobs.get(&id) {
            self.retry_tag(env, id);
        }
    }
}
