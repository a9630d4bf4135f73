//! Registry nodes wired to a [`Fabric`], plus in-simulation HTTP clients.

use std::collections::HashMap;
use std::sync::Arc;

use bytes::Bytes;
use edgepier_core::cas::{Backend, MemoryBackend, Store, StoreConfig};
use edgepier_core::gateway::{Body, ErrorCode, HttpRequest, HttpResponse, HDR_DIGEST};
use edgepier_core::image::{BuiltImage, Descriptor, ImageManifest};
use edgepier_core::node::{Env, Node, NodeConfig, NodeEvent, RequestId, Timer};
use edgepier_core::time::{Micros, Timestamp};
use edgepier_core::wire::Message;
use edgepier_core::ContentId;
use log::warn;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fabric::{Event, Fabric, NodeIdx};
use crate::topology::Topology;

/// HTTP responses travel in messages of at most this size.
pub const HTTP_SEGMENT: u64 = 256 * 1024;
/// Request line, headers and framing.
pub const HTTP_OVERHEAD: u64 = 256;

#[derive(Debug)]
pub enum Payload {
    Peer(Message),
    HttpRequest { id: u64, req: HttpRequest },
    /// Part of a response; the last part carries it.
    HttpSegment { id: u64, response: Option<Box<HttpResponse>> },
}

#[derive(Debug)]
pub enum SimTimer {
    Node { timer: Timer, epoch: u32 },
    HttpLocal { id: u64, response: Box<HttpResponse> },
    ClientStart(usize),
}

pub type SimFabric = Fabric<Payload, SimTimer>;

#[derive(Debug, Clone, Copy)]
struct HttpCall {
    from: NodeIdx,
}

#[derive(Debug, Clone, Copy)]
enum Owner {
    Client(usize),
    Collect,
}

/// A node's configuration and the storage it starts from.
pub struct NodeSetup {
    pub config: NodeConfig,
    pub backend: Arc<MemoryBackend>,
    pub store: StoreConfig,
}

pub struct SimNode {
    pub name: String,
    node: Node,
    setup_config: NodeConfig,
    store_config: StoreConfig,
    backend: Arc<MemoryBackend>,
    rng: ChaCha8Rng,
    epoch: u32,
    /// Body bytes of successful GET responses served by this node's gateway.
    pub http_body_bytes: u64,
}

struct SimEnv<'a> {
    fabric: &'a mut SimFabric,
    me: NodeIdx,
    epoch: u32,
    rng: &'a mut ChaCha8Rng,
    store: Arc<Store>,
    http: &'a mut HashMap<u64, HttpCall>,
    events: &'a mut Vec<(NodeIdx, Timestamp, NodeEvent)>,
    body_bytes: &'a mut u64,
}

impl Env for SimEnv<'_> {
    fn now(&self) -> Timestamp {
        self.fabric.now()
    }

    fn send(&mut self, to: &str, msg: Message) {
        let Some(dst) = self.fabric.index_of(to) else {
            warn!("{} sent to unknown address {to}", self.fabric.name_of(self.me));
            return;
        };
        let bytes = msg.frame_len() as u64;
        self.fabric.send(self.me, dst, bytes, Payload::Peer(msg));
    }

    fn set_timer(&mut self, delay: Micros, timer: Timer) {
        let epoch = self.epoch;
        self.fabric.schedule(delay, self.me, SimTimer::Node { timer, epoch });
    }

    fn respond(&mut self, id: RequestId, mut resp: HttpResponse) {
        let Some(call) = self.http.remove(&id) else {
            warn!("response for unknown request {id}");
            return;
        };
        if let Body::Blob { root, .. } = resp.body {
            resp.body = match self.store.assemble(&root) {
                Ok(b) => Body::Bytes(Bytes::from(b)),
                Err(e) => {
                    warn!("cannot stream {}: {e}", root.short());
                    resp = HttpResponse::error(500, ErrorCode::Unavailable, &e.to_string());
                    resp.body
                }
            };
        }
        let body_len = resp.body.len();
        if resp.status == 200 {
            *self.body_bytes += body_len;
        }
        if call.from == self.me {
            self.fabric.schedule(
                0,
                self.me,
                SimTimer::HttpLocal {
                    id,
                    response: Box::new(resp),
                },
            );
            return;
        }
        let total = HTTP_OVERHEAD + body_len;
        let mut left = total;
        while left > HTTP_SEGMENT {
            self.fabric.send(
                self.me,
                call.from,
                HTTP_SEGMENT,
                Payload::HttpSegment { id, response: None },
            );
            left -= HTTP_SEGMENT;
        }
        self.fabric.send(
            self.me,
            call.from,
            left,
            Payload::HttpSegment {
                id,
                response: Some(Box::new(resp)),
            },
        );
    }

    fn random(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn egress_backlog(&self) -> Micros {
        self.fabric.egress_backlog(self.me)
    }

    fn emit(&mut self, event: NodeEvent) {
        let now = self.fabric.now();
        self.events.push((self.me, now, event));
    }
}

/// Outcome of one in-simulation image pull.
#[derive(Debug, Clone, Default)]
pub struct PullReport {
    pub node: NodeIdx,
    pub started: Option<Timestamp>,
    pub finished: Option<Timestamp>,
    pub error: Option<String>,
    /// Verified body bytes received.
    pub bytes: u64,
    pub manifest: Option<ContentId>,
    /// Blobs received, in request order.
    pub blobs: Vec<ContentId>,
}

impl PullReport {
    pub fn is_ok(&self) -> bool {
        self.finished.is_some() && self.error.is_none()
    }

    pub fn duration(&self) -> Option<Micros> {
        Some(self.finished? - self.started?)
    }
}

enum Stage {
    Idle,
    Manifest,
    Blob(Descriptor),
    Done,
}

/// Plain registry client: manifest, then config, then every layer one at a
/// time in a seeded random order, verifying each digest.
struct PullClient {
    node: NodeIdx,
    gateway: NodeIdx,
    name: String,
    reference: String,
    stage: Stage,
    queue: Vec<Descriptor>,
    rng: ChaCha8Rng,
    keep: bool,
    kept: Vec<(ContentId, Bytes)>,
    report: PullReport,
}

pub struct Cluster {
    fabric: SimFabric,
    nodes: Vec<SimNode>,
    http: HashMap<u64, HttpCall>,
    owners: HashMap<u64, Owner>,
    responses: HashMap<u64, HttpResponse>,
    next_http: u64,
    clients: Vec<PullClient>,
    events: Vec<(NodeIdx, Timestamp, NodeEvent)>,
    seed: u64,
}

fn node_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(idx as u64 + 1);
    r
}

impl Cluster {
    /// One setup per topology node, in topology order.
    pub fn new(topo: &Topology, setups: Vec<NodeSetup>) -> Result<Self, edgepier_core::CasError> {
        assert_eq!(topo.nodes.len(), setups.len(), "one setup per node");
        let fabric = SimFabric::new(topo);
        let mut nodes = Vec::with_capacity(setups.len());
        for (i, s) in setups.into_iter().enumerate() {
            assert_eq!(s.config.addr, topo.nodes[i], "setups follow topology order");
            let store = Arc::new(Store::open(s.backend.clone() as Arc<dyn Backend>, s.store.clone())?);
            nodes.push(SimNode {
                name: topo.nodes[i].clone(),
                node: Node::new(s.config.clone(), store),
                setup_config: s.config,
                store_config: s.store,
                backend: s.backend,
                rng: node_rng(topo.seed, i),
                epoch: 0,
                http_body_bytes: 0,
            });
        }
        Ok(Cluster {
            fabric,
            nodes,
            http: HashMap::new(),
            owners: HashMap::new(),
            responses: HashMap::new(),
            next_http: 1,
            clients: Vec::new(),
            events: Vec::new(),
            seed: topo.seed,
        })
    }

    pub fn now(&self) -> Timestamp {
        self.fabric.now()
    }

    pub fn fabric(&self) -> &SimFabric {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut SimFabric {
        &mut self.fabric
    }

    pub fn idx(&self, name: &str) -> NodeIdx {
        self.fabric
            .index_of(name)
            .unwrap_or_else(|| panic!("no node named {name}"))
    }

    pub fn node(&self, name: &str) -> &Node {
        &self.nodes[self.idx(name)].node
    }

    pub fn sim_node(&self, idx: NodeIdx) -> &SimNode {
        &self.nodes[idx]
    }

    pub fn node_at(&self, idx: NodeIdx) -> &Node {
        &self.nodes[idx].node
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn store(&self, name: &str) -> Arc<Store> {
        self.node(name).store().clone()
    }

    pub fn backend(&self, name: &str) -> Arc<MemoryBackend> {
        self.nodes[self.idx(name)].backend.clone()
    }

    pub fn events(&self) -> &[(NodeIdx, Timestamp, NodeEvent)] {
        &self.events
    }

    fn with_node<R>(&mut self, i: NodeIdx, f: impl FnOnce(&mut Node, &mut dyn Env) -> R) -> R {
        let n = &mut self.nodes[i];
        let mut env = SimEnv {
            fabric: &mut self.fabric,
            me: i,
            epoch: n.epoch,
            rng: &mut n.rng,
            store: n.node.store().clone(),
            http: &mut self.http,
            events: &mut self.events,
            body_bytes: &mut n.http_body_bytes,
        };
        f(&mut n.node, &mut env)
    }

    /// Starts every node: greetings, announcements and periodic timers.
    pub fn start(&mut self) {
        for i in 0..self.nodes.len() {
            self.with_node(i, |n, env| n.start(env));
        }
    }

    /// Publishes an image already chunked into `node`'s store.
    pub fn publish(&mut self, node: &str, name: &str, tag: &str, image: &BuiltImage) -> Result<(), edgepier_core::CasError> {
        let i = self.idx(node);
        self.with_node(i, |n, env| n.publish_image(env, name, tag, image))
    }

    /// Stops a node: it neither sends nor receives, and its timers die.
    pub fn crash(&mut self, name: &str) {
        let i = self.idx(name);
        self.fabric.set_down(i, true);
        self.nodes[i].epoch += 1;
    }

    /// Brings a crashed node back with a fresh process over its old storage.
    pub fn restart(&mut self, name: &str) -> Result<(), edgepier_core::CasError> {
        let i = self.idx(name);
        let n = &mut self.nodes[i];
        let store = Arc::new(Store::open(
            n.backend.clone() as Arc<dyn Backend>,
            n.store_config.clone(),
        )?);
        let pinset = n.node.pinset().clone();
        n.node = Node::new(n.setup_config.clone(), store);
        n.node.restore_pinset(&pinset);
        n.epoch += 1;
        self.fabric.set_down(i, false);
        self.with_node(i, |n, env| n.start(env));
        Ok(())
    }

    pub fn set_serve_blocks(&mut self, name: &str, on: bool) {
        let i = self.idx(name);
        self.nodes[i].node.set_serve_blocks(on);
    }

    // ---- HTTP -----------------------------------------------------------

    fn send_http(&mut self, from: NodeIdx, gateway: NodeIdx, owner: Owner, req: HttpRequest) -> u64 {
        let id = self.next_http;
        self.next_http += 1;
        self.owners.insert(id, owner);
        self.http.insert(id, HttpCall { from });
        if from == gateway {
            self.with_node(gateway, |n, env| n.on_http(env, id, req));
        } else {
            let bytes = HTTP_OVERHEAD + req.body.len() as u64;
            self.fabric
                .send(from, gateway, bytes, Payload::HttpRequest { id, req });
        }
        id
    }

    /// Issues `req` from `from` to `gateway` and runs until it is answered.
    pub fn http(&mut self, from: &str, gateway: &str, req: HttpRequest, limit: Micros) -> Option<HttpResponse> {
        let (f, g) = (self.idx(from), self.idx(gateway));
        let id = self.send_http(f, g, Owner::Collect, req);
        let deadline = self.now() + limit;
        self.run_until(|c| c.responses.contains_key(&id), deadline);
        self.responses.remove(&id)
    }

    fn complete_http(&mut self, id: u64, resp: HttpResponse) {
        self.http.remove(&id);
        match self.owners.remove(&id) {
            Some(Owner::Client(c)) => self.client_response(c, resp),
            Some(Owner::Collect) => {
                self.responses.insert(id, resp);
            }
            None => {}
        }
    }

    // ---- pull clients ---------------------------------------------------

    /// Registers a pull of `name:reference` on `node` through `gateway`.
    pub fn add_pull(&mut self, node: &str, gateway: &str, name: &str, reference: &str) -> usize {
        let id = self.clients.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c11e);
        rng.set_stream(id as u64 + 1);
        let node = self.idx(node);
        self.clients.push(PullClient {
            node,
            gateway: self.idx(gateway),
            name: name.to_string(),
            reference: reference.to_string(),
            stage: Stage::Idle,
            queue: Vec::new(),
            rng,
            keep: false,
            kept: Vec::new(),
            report: PullReport {
                node,
                ..Default::default()
            },
        });
        id
    }

    /// Keeps the pulled blob bytes for inspection.
    pub fn keep_blobs(&mut self, client: usize) {
        self.clients[client].keep = true;
    }

    pub fn pulled_blobs(&self, client: usize) -> &[(ContentId, Bytes)] {
        &self.clients[client].kept
    }

    pub fn start_pull(&mut self, client: usize, delay: Micros) {
        let node = self.clients[client].node;
        self.fabric.schedule(delay, node, SimTimer::ClientStart(client));
    }

    pub fn pull_report(&self, client: usize) -> &PullReport {
        &self.clients[client].report
    }

    pub fn pull_finished(&self, client: usize) -> bool {
        let r = &self.clients[client].report;
        r.finished.is_some() || r.error.is_some()
    }

    /// Runs a pull to completion and returns its report.
    pub fn pull(&mut self, node: &str, gateway: &str, name: &str, reference: &str, limit: Micros) -> PullReport {
        let c = self.add_pull(node, gateway, name, reference);
        self.start_pull(c, 0);
        let deadline = self.now() + limit;
        if !self.run_until(|cl| cl.pull_finished(c), deadline) {
            self.clients[c].report.error = Some("timed out".into());
        }
        self.clients[c].report.clone()
    }

    fn client_start(&mut self, c: usize) {
        let cl = &mut self.clients[c];
        cl.report.started = Some(self.fabric.now());
        cl.stage = Stage::Manifest;
        let req = HttpRequest::get(format!("/v2/{}/manifests/{}", cl.name, cl.reference));
        let (from, gw) = (cl.node, cl.gateway);
        self.send_http(from, gw, Owner::Client(c), req);
    }

    fn client_fail(&mut self, c: usize, why: String) {
        let cl = &mut self.clients[c];
        cl.stage = Stage::Done;
        cl.report.error = Some(why);
        cl.report.finished = Some(self.fabric.now());
    }

    fn client_response(&mut self, c: usize, resp: HttpResponse) {
        let body = match &resp.body {
            Body::Bytes(b) => b.clone(),
            _ => Bytes::new(),
        };
        if resp.status != 200 {
            let code = resp.error_code().unwrap_or_default();
            return self.client_fail(c, format!("HTTP {} {code}", resp.status));
        }
        let digest = ContentId::digest(&body);
        let stage = std::mem::replace(&mut self.clients[c].stage, Stage::Idle);
        match stage {
            Stage::Manifest => {
                if let Some(h) = resp.get_header(HDR_DIGEST) {
                    if h != digest.to_string() {
                        return self.client_fail(c, format!("manifest digest {digest} != header {h}"));
                    }
                }
                let m = match ImageManifest::parse(body.clone()) {
                    Ok(m) => m,
                    Err(e) => return self.client_fail(c, format!("bad manifest: {e}")),
                };
                let cl = &mut self.clients[c];
                cl.report.manifest = Some(digest);
                cl.report.bytes += body.len() as u64;
                let mut layers = m.layers.clone();
                // Fisher-Yates with the client's own stream.
                for i in (1..layers.len()).rev() {
                    let j = (cl.rng.next_u64() % (i as u64 + 1)) as usize;
                    layers.swap(i, j);
                }
                layers.reverse();
                layers.push(m.config.clone());
                cl.queue = layers;
            }
            Stage::Blob(d) => {
                if digest != d.digest || body.len() as u64 != d.size {
                    return self.client_fail(c, format!("blob {} failed verification", d.digest));
                }
                let cl = &mut self.clients[c];
                cl.report.bytes += body.len() as u64;
                cl.report.blobs.push(d.digest);
                if cl.keep {
                    cl.kept.push((d.digest, body));
                }
            }
            Stage::Idle | Stage::Done => return,
        }
        let cl = &mut self.clients[c];
        match cl.queue.pop() {
            Some(d) => {
                let req = HttpRequest::get(format!("/v2/{}/blobs/{}", cl.name, d.digest));
                cl.stage = Stage::Blob(d);
                let (from, gw) = (cl.node, cl.gateway);
                self.send_http(from, gw, Owner::Client(c), req);
            }
            None => {
                cl.stage = Stage::Done;
                cl.report.finished = Some(self.fabric.now());
            }
        }
    }

    // ---- event loop -----------------------------------------------------

    /// Processes one event. Returns false when nothing is due before `limit`.
    pub fn step_until(&mut self, limit: Timestamp) -> bool {
        let Some((_, ev)) = self.fabric.step_until(limit) else {
            return false;
        };
        match ev {
            Event::Deliver { from, to, payload, .. } => match payload {
                Payload::Peer(msg) => {
                    let from = self.nodes[from].name.clone();
                    self.with_node(to, |n, env| n.on_message(env, &from, msg));
                }
                Payload::HttpRequest { id, req } => {
                    self.with_node(to, |n, env| n.on_http(env, id, req));
                }
                Payload::HttpSegment { id, response } => {
                    if let Some(r) = response {
                        self.complete_http(id, *r);
                    }
                }
            },
            Event::SendFailed { from, to, payload } => match payload {
                Payload::Peer(msg) => {
                    let to = self.nodes[to].name.clone();
                    if !self.fabric.is_down(from) {
                        self.with_node(from, |n, env| n.on_send_failed(env, &to, &msg));
                    }
                }
                Payload::HttpRequest { id, .. } | Payload::HttpSegment { id, .. } => {
                    let resp = HttpResponse::error(502, ErrorCode::Unavailable, "connection refused");
                    self.complete_http(id, resp);
                }
            },
            Event::Timer { node, timer } => match timer {
                SimTimer::Node { timer, epoch } => {
                    if epoch == self.nodes[node].epoch && !self.fabric.is_down(node) {
                        self.with_node(node, |n, env| n.on_timer(env, timer));
                    }
                }
                SimTimer::HttpLocal { id, response } => self.complete_http(id, *response),
                SimTimer::ClientStart(c) => self.client_start(c),
            },
        }
        true
    }

    /// Runs until `done` holds or the clock would pass `deadline`.
    pub fn run_until(&mut self, mut done: impl FnMut(&Cluster) -> bool, deadline: Timestamp) -> bool {
        loop {
            if done(self) {
                return true;
            }
            if !self.step_until(deadline) {
                return done(self);
            }
        }
    }

    /// Runs for `d` of virtual time.
    pub fn run_for(&mut self, d: Micros) {
        let end = self.now() + d;
        while self.step_until(end) {}
        let rest = end - self.now();
        self.fabric.advance(rest);
    }
}
