//! Virtual-time message fabric.
//!
//! Every directed node pair maps onto a shaped link. Links serialize their
//! messages through a token bucket; pairs sharing a link are served
//! round-robin one message at a time. A message is delivered one latency
//! after its last bit leaves the bucket. Delivery order per pair is FIFO.
//!
//! Which pairs share a link:
//! * a per-pair override gets a dedicated link per direction;
//! * everything leaving the uplink origin shares one link, and everything
//!   sent to it shares another;
//! * all other traffic leaves through the sender's own link.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use edgepier_core::time::{Micros, Timestamp, SECOND};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::topology::{LinkShape, Topology};

pub type NodeIdx = usize;
pub type LinkIdx = usize;

/// Token bucket depth.
pub const BURST_BYTES: u64 = 64 * 1024;

/// Units of the token bucket: bits scaled by one million, so refilling for
/// one microsecond at `bps` adds exactly `bps` units.
const SCALE: u128 = 1_000_000;

#[derive(Debug)]
pub enum Event<P, T> {
    Deliver {
        from: NodeIdx,
        to: NodeIdx,
        bytes: u64,
        payload: P,
    },
    /// The destination refused the connection.
    SendFailed { from: NodeIdx, to: NodeIdx, payload: P },
    Timer { node: NodeIdx, timer: T },
}

enum Internal<P, T> {
    User(Event<P, T>),
    TxDone(LinkIdx),
}

struct Scheduled<E> {
    at: Timestamp,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Scheduled<E> {}
impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Scheduled<E> {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Pending<P> {
    from: NodeIdx,
    to: NodeIdx,
    bytes: u64,
    payload: P,
}

struct Link<P> {
    name: String,
    shape: LinkShape,
    tokens: u128,
    refilled_at: Timestamp,
    queues: BTreeMap<(NodeIdx, NodeIdx), VecDeque<Pending<P>>>,
    ring: VecDeque<(NodeIdx, NodeIdx)>,
    queued_bytes: u64,
    in_flight: Option<Pending<P>>,
    busy_until: Timestamp,
    /// Bytes per one-second bucket.
    util: Vec<u64>,
}

impl<P> Link<P> {
    fn new(name: String, shape: LinkShape) -> Self {
        Link {
            name,
            shape,
            tokens: BURST_BYTES as u128 * 8 * SCALE,
            refilled_at: 0,
            queues: BTreeMap::new(),
            ring: VecDeque::new(),
            queued_bytes: 0,
            in_flight: None,
            busy_until: 0,
            util: Vec::new(),
        }
    }

    fn refill(&mut self, now: Timestamp) {
        let cap = BURST_BYTES as u128 * 8 * SCALE;
        let dt = now.saturating_sub(self.refilled_at) as u128;
        self.tokens = (self.tokens + dt * self.shape.bandwidth_bps as u128).min(cap);
        self.refilled_at = now;
    }

    /// Spreads `bytes` evenly over `[start, end)` in the utilization series.
    fn account(&mut self, bytes: u64, start: Timestamp, end: Timestamp) {
        let last = (end.max(start + 1) - 1) / SECOND;
        if self.util.len() <= last as usize {
            self.util.resize(last as usize + 1, 0);
        }
        if end <= start {
            self.util[(start / SECOND) as usize] += bytes;
            return;
        }
        let span = (end - start) as u128;
        let mut assigned = 0u64;
        let mut t = start;
        while t < end {
            let bucket_end = ((t / SECOND) + 1) * SECOND;
            let seg_end = bucket_end.min(end);
            let share = if seg_end == end {
                bytes - assigned
            } else {
                ((bytes as u128 * (seg_end - start) as u128) / span) as u64 - assigned
            };
            self.util[(t / SECOND) as usize] += share;
            assigned += share;
            t = seg_end;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounters {
    pub bytes_sent: u64,
    pub messages_sent: u64,
    pub bytes_delivered: u64,
    pub messages_delivered: u64,
    pub bytes_dropped: u64,
    pub messages_dropped: u64,
}

pub struct Fabric<P, T> {
    now: Timestamp,
    seq: u64,
    queue: BinaryHeap<Scheduled<Internal<P, T>>>,
    names: Vec<String>,
    index: HashMap<String, NodeIdx>,
    /// Link and one-way latency per directed pair.
    routes: Vec<Vec<(LinkIdx, Micros)>>,
    links: Vec<Link<P>>,
    counters: Vec<Vec<PairCounters>>,
    blocked: BTreeSet<(NodeIdx, NodeIdx)>,
    down: Vec<bool>,
    rng: ChaCha8Rng,
    events_processed: u64,
}

impl<P, T> Fabric<P, T> {
    pub fn new(topo: &Topology) -> Self {
        let names = topo.nodes.clone();
        let n = names.len();
        let index: HashMap<String, NodeIdx> =
            names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut links: Vec<Link<P>> = Vec::new();
        let mut named: HashMap<String, LinkIdx> = HashMap::new();
        let mut link_for = |name: String, shape: LinkShape, links: &mut Vec<Link<P>>| -> LinkIdx {
            *named.entry(name.clone()).or_insert_with(|| {
                links.push(Link::new(name, shape));
                links.len() - 1
            })
        };
        let origin = topo.uplink.as_ref().map(|u| u.origin.as_str());
        let mut routes = vec![Vec::with_capacity(n); n];
        for (a, an) in names.iter().enumerate() {
            for bn in names.iter() {
                let shape = topo.shape(an, bn);
                let name = if topo.overrides.contains_key(&(an.clone(), bn.clone())) {
                    format!("{an}->{bn}")
                } else if Some(an.as_str()) == origin {
                    "uplink-down".to_string()
                } else if Some(bn.as_str()) == origin {
                    "uplink-up".to_string()
                } else {
                    format!("{an}-nic")
                };
                let l = link_for(name, shape, &mut links);
                routes[a].push((l, shape.latency));
            }
        }
        Fabric {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            names,
            index,
            routes,
            links,
            counters: vec![vec![PairCounters::default(); n]; n],
            blocked: BTreeSet::new(),
            down: vec![false; n],
            rng: ChaCha8Rng::seed_from_u64(topo.seed),
            events_processed: 0,
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<NodeIdx> {
        self.index.get(name).copied()
    }

    pub fn name_of(&self, idx: NodeIdx) -> &str {
        &self.names[idx]
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    fn push(&mut self, at: Timestamp, ev: Internal<P, T>) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, ev });
    }

    pub fn schedule(&mut self, delay: Micros, node: NodeIdx, timer: T) {
        let at = self.now + delay;
        self.push(at, Internal::User(Event::Timer { node, timer }));
    }

    pub fn reachable(&self, a: NodeIdx, b: NodeIdx) -> bool {
        !self.down[a] && !self.down[b] && !self.blocked.contains(&(a, b))
    }

    /// Queues `bytes` from `from` to `to`. A refused connection is reported
    /// back to the sender as [`Event::SendFailed`] after one round trip.
    pub fn send(&mut self, from: NodeIdx, to: NodeIdx, bytes: u64, payload: P) -> bool {
        let (link, latency) = self.routes[from][to];
        if !self.reachable(from, to) || self.links[link].shape.drop_prob >= 1.0 {
            let at = self.now + 2 * latency;
            self.push(at, Internal::User(Event::SendFailed { from, to, payload }));
            return false;
        }
        let c = &mut self.counters[from][to];
        c.bytes_sent += bytes;
        c.messages_sent += 1;
        if from == to {
            c.bytes_delivered += bytes;
            c.messages_delivered += 1;
            let at = self.now;
            self.push(at, Internal::User(Event::Deliver { from, to, bytes, payload }));
            return true;
        }
        let l = &mut self.links[link];
        let q = l.queues.entry((from, to)).or_default();
        if q.is_empty() {
            l.ring.push_back((from, to));
        }
        q.push_back(Pending { from, to, bytes, payload });
        l.queued_bytes += bytes;
        if l.in_flight.is_none() {
            self.start_next(link);
        }
        true
    }

    fn start_next(&mut self, link: LinkIdx) {
        let now = self.now;
        let l = &mut self.links[link];
        let Some(pair) = l.ring.pop_front() else { return };
        let q = l.queues.get_mut(&pair).expect("ring entries have queues");
        let msg = q.pop_front().expect("ring entries are non-empty");
        if !q.is_empty() {
            l.ring.push_back(pair);
        }
        l.queued_bytes -= msg.bytes;
        l.refill(now);
        let need = msg.bytes as u128 * 8 * SCALE;
        let done = if l.tokens >= need {
            l.tokens -= need;
            now
        } else {
            let deficit = need - l.tokens;
            l.tokens = 0;
            let bps = l.shape.bandwidth_bps as u128;
            let wait = deficit.div_ceil(bps) as u64;
            // Tokens accrue from the moment the wait ends.
            l.refilled_at = now + wait;
            now + wait
        };
        l.account(msg.bytes, now, done);
        l.busy_until = done;
        l.in_flight = Some(msg);
        self.push(done, Internal::TxDone(link));
    }

    fn finish_tx(&mut self, link: LinkIdx) {
        let msg = self.links[link].in_flight.take().expect("tx in flight");
        let (_, latency) = self.routes[msg.from][msg.to];
        let drop_prob = self.links[link].shape.drop_prob;
        let lost = !self.reachable(msg.from, msg.to)
            || (drop_prob > 0.0 && self.rng.random::<f64>() < drop_prob);
        if lost {
            let c = &mut self.counters[msg.from][msg.to];
            c.bytes_dropped += msg.bytes;
            c.messages_dropped += 1;
        } else {
            let at = self.now + latency;
            self.push(
                at,
                Internal::User(Event::Deliver {
                    from: msg.from,
                    to: msg.to,
                    bytes: msg.bytes,
                    payload: msg.payload,
                }),
            );
        }
        self.start_next(link);
    }

    /// Pops the next user-visible event, advancing the clock to it.
    pub fn step(&mut self) -> Option<(Timestamp, Event<P, T>)> {
        self.step_until(Timestamp::MAX)
    }

    /// Like [`Fabric::step`] but never moves past `limit`.
    pub fn step_until(&mut self, limit: Timestamp) -> Option<(Timestamp, Event<P, T>)> {
        loop {
            if self.queue.peek()?.at > limit {
                return None;
            }
            let s = self.queue.pop().unwrap();
            self.now = s.at;
            self.events_processed += 1;
            match s.ev {
                Internal::TxDone(link) => self.finish_tx(link),
                Internal::User(Event::Deliver { from, to, bytes, payload }) => {
                    if !self.reachable(from, to) {
                        let c = &mut self.counters[from][to];
                        c.bytes_dropped += bytes;
                        c.messages_dropped += 1;
                        continue;
                    }
                    if from != to {
                        let c = &mut self.counters[from][to];
                        c.bytes_delivered += bytes;
                        c.messages_delivered += 1;
                    }
                    return Some((s.at, Event::Deliver { from, to, bytes, payload }));
                }
                Internal::User(ev) => return Some((s.at, ev)),
            }
        }
    }

    /// Processes every event due within `d` and leaves the clock at `now + d`.
    pub fn advance(&mut self, d: Micros) -> Vec<(Timestamp, Event<P, T>)> {
        let end = self.now + d;
        let mut out = Vec::new();
        while let Some(e) = self.step_until(end) {
            out.push(e);
        }
        self.now = end;
        out
    }

    pub fn next_event_at(&self) -> Option<Timestamp> {
        self.queue.peek().map(|s| s.at)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Cuts every pair across the two sets. In-flight messages are lost.
    pub fn partition(&mut self, a: &[NodeIdx], b: &[NodeIdx]) {
        for &x in a {
            for &y in b {
                self.blocked.insert((x, y));
                self.blocked.insert((y, x));
            }
        }
    }

    pub fn heal(&mut self) {
        self.blocked.clear();
    }

    pub fn set_down(&mut self, node: NodeIdx, down: bool) {
        self.down[node] = down;
    }

    pub fn is_down(&self, node: NodeIdx) -> bool {
        self.down[node]
    }

    pub fn counters(&self, from: NodeIdx, to: NodeIdx) -> PairCounters {
        self.counters[from][to]
    }

    pub fn link_of(&self, from: NodeIdx, to: NodeIdx) -> LinkIdx {
        self.routes[from][to].0
    }

    pub fn link_by_name(&self, name: &str) -> Option<LinkIdx> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn link_shape(&self, link: LinkIdx) -> LinkShape {
        self.links[link].shape
    }

    /// Per-second throughput of `link` in Mbit/s, from time zero.
    pub fn utilization_mbps(&self, link: LinkIdx) -> Vec<f64> {
        self.links[link]
            .util
            .iter()
            .map(|b| *b as f64 * 8.0 / 1e6)
            .collect()
    }

    pub fn utilization_bytes(&self, link: LinkIdx) -> &[u64] {
        &self.links[link].util
    }

    /// How long the links `node` sends on need to drain what is queued.
    pub fn egress_backlog(&self, node: NodeIdx) -> Micros {
        let mut seen = BTreeSet::new();
        let mut worst = 0;
        for (to, (link, _)) in self.routes[node].iter().enumerate() {
            if to == node || !seen.insert(*link) {
                continue;
            }
            let l = &self.links[*link];
            let queued = l.queued_bytes as u128 * 8 * SCALE / l.shape.bandwidth_bps as u128;
            let busy = l.busy_until.saturating_sub(self.now);
            worst = worst.max(busy + queued as u64);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::LinkShape;

    #[test]
    fn account_spreads_over_buckets() {
        let mut l: Link<()> = Link::new("x".into(), LinkShape::mbps(8.0, 0.0));
        l.account(300, SECOND / 2, SECOND * 2);
        assert_eq!(l.util, vec![100, 200]);
        l.account(7, 5 * SECOND, 5 * SECOND);
        assert_eq!(l.util[5], 7);
    }
}
