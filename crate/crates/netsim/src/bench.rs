//! Experiment scenarios: an origin registry behind a shaped uplink and a
//! site of nodes that all pull the same image, with P2P sharing or without.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use edgepier_core::cas::{MemoryBackend, Store, StoreConfig, DEFAULT_CHUNK_SIZE};
use edgepier_core::exchange::ExchangeConfig;
use edgepier_core::image::{build_image, BuiltImage};
use edgepier_core::node::{AgentCosts, NodeConfig};
use edgepier_core::replication::Factor;
use edgepier_core::time::{millis, secs, Micros, Timestamp, SECOND};
use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Cluster, NodeSetup};
use crate::topology::{LinkShape, Topology, INTRA_LATENCY, UPLINK_LATENCY};

pub const ORIGIN: &str = "origin";
pub const IMAGE_NAME: &str = "bench/app";
pub const IMAGE_TAG: &str = "v1";
pub const MB: u64 = 1_000_000;

/// Per-block agent processing time used by the benchmarks. Chosen so that a
/// site pull served entirely by peers is bounded by the agent rather than
/// by the LAN, as with a real daemon writing every block to disk.
pub const BENCH_COSTS: AgentCosts = AgentCosts {
    ingest_per_block: millis(30),
    serve_per_block: millis(2),
};

/// Scenario start, leaving time for greetings and the first announcements.
const WARMUP: Micros = SECOND;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench spec: {0}")]
    Spec(String),
    #[error("storage: {0}")]
    Store(#[from] edgepier_core::CasError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Sequential,
    Concurrent,
    SizeSweep,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Sequential => "sequential",
            Scenario::Concurrent => "concurrent",
            Scenario::SizeSweep => "size-sweep",
        })
    }
}

impl FromStr for Scenario {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Scenario::Sequential),
            "concurrent" => Ok(Scenario::Concurrent),
            "size-sweep" | "size_sweep" => Ok(Scenario::SizeSweep),
            _ => Err(BenchError::Spec(format!("unknown scenario {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[serde(rename = "edgepier")]
    EdgePier,
    Baseline,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::EdgePier => "edgepier",
            Mode::Baseline => "baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edgepier" => Ok(Mode::EdgePier),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(BenchError::Spec(format!("unknown mode {s:?}"))),
        }
    }
}

/// Everything that defines one simulated site.
#[derive(Debug, Clone)]
pub struct SiteSpec {
    pub nodes: usize,
    pub intra: LinkShape,
    pub uplink: LinkShape,
    pub mode: Mode,
    pub costs: AgentCosts,
    pub chunk_size: usize,
    pub replication: bool,
    pub factor: Factor,
    pub exchange: ExchangeConfig,
    pub seed: u64,
}

impl SiteSpec {
    pub fn new(nodes: usize, uplink_mbps: f64, intra_mbps: f64, mode: Mode, seed: u64) -> Self {
        SiteSpec {
            nodes,
            intra: LinkShape::mbps(intra_mbps, INTRA_LATENCY as f64 / 1000.0),
            uplink: LinkShape::mbps(uplink_mbps, UPLINK_LATENCY as f64 / 1000.0),
            mode,
            costs: BENCH_COSTS,
            chunk_size: DEFAULT_CHUNK_SIZE,
            replication: false,
            factor: Factor::All,
            exchange: ExchangeConfig::default(),
            seed,
        }
    }
}

pub fn site_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("node{i}")).collect()
}

/// Builds origin plus `spec.nodes` site nodes. The origin starts from a
/// copy of `origin_blocks`; site stores start empty.
pub fn build_site(spec: &SiteSpec, origin_blocks: &MemoryBackend) -> Result<Cluster, BenchError> {
    let sites = site_names(spec.nodes);
    let topo = Topology::edge_site(ORIGIN, &sites, spec.intra, spec.uplink, spec.seed);
    let store = StoreConfig {
        chunk_size: spec.chunk_size,
        capacity: None,
    };
    let mut origin = NodeConfig::new(ORIGIN);
    origin.p2p = false;
    origin.replication = false;
    origin.costs = spec.costs;
    let mut setups = vec![NodeSetup {
        config: origin,
        backend: Arc::new(origin_blocks.snapshot()),
        store: store.clone(),
    }];
    for s in &sites {
        let mut c = NodeConfig::new(s.clone());
        c.origin = Some(ORIGIN.to_string());
        c.members = sites.clone();
        c.costs = spec.costs;
        c.exchange = spec.exchange.clone();
        c.factor = spec.factor;
        match spec.mode {
            Mode::EdgePier => {
                c.replication = spec.replication;
            }
            Mode::Baseline => {
                c.p2p = false;
                c.serve_blocks = false;
                c.replication = false;
            }
        }
        setups.push(NodeSetup {
            config: c,
            backend: Arc::new(MemoryBackend::new()),
            store: store.clone(),
        });
    }
    Ok(Cluster::new(&topo, setups)?)
}

/// A synthetic image chunked into an origin store.
pub struct PreparedImage {
    pub blocks: MemoryBackend,
    pub image: BuiltImage,
    /// Manifest, config and layer bytes together.
    pub image_bytes: u64,
}

/// Builds an image of `layers` incompressible layers totalling `total` bytes.
pub fn prepare_image(total: u64, layers: usize, seed: u64, chunk_size: usize) -> Result<PreparedImage, BenchError> {
    if layers == 0 || total < layers as u64 {
        return Err(BenchError::Spec("image needs at least one byte per layer".into()));
    }
    let blocks = Arc::new(MemoryBackend::new());
    let store = Store::open(
        blocks.clone(),
        StoreConfig {
            chunk_size,
            capacity: None,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = total / layers as u64;
    let mut data = Vec::with_capacity(layers);
    for i in 0..layers {
        let len = if i + 1 == layers { total - per * (layers as u64 - 1) } else { per };
        let mut v = vec![0u8; len as usize];
        rng.fill_bytes(&mut v);
        data.push(v);
    }
    let config = format!(
        "{{\"architecture\":\"amd64\",\"os\":\"linux\",\"rootfs\":{{\"type\":\"layers\",\"seed\":{seed}}}}}"
    );
    let refs: Vec<&[u8]> = data.iter().map(|v| v.as_slice()).collect();
    let image = build_image(&store, &refs, config.as_bytes())?;
    let image_bytes = image.manifest.bytes().len() as u64 + image.manifest.blobs().map(|b| b.size).sum::<u64>();
    drop(store);
    let blocks = Arc::try_unwrap(blocks).unwrap_or_else(|b| b.snapshot());
    Ok(PreparedImage {
        blocks,
        image,
        image_bytes,
    })
}

/// Result of one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario: Scenario,
    pub mode: Mode,
    pub bandwidth_mbps: f64,
    pub repetition: usize,
    pub image_mb: u64,
    pub distribution_ms: f64,
    /// Per site node, in start order: (node number, pull time).
    pub pulls: Vec<(usize, f64)>,
    /// Origin to site throughput per second from scenario start.
    pub uplink_mbps: Vec<f64>,
    /// Content bytes the origin delivered to the site.
    pub origin_bytes: u64,
    /// Bytes that crossed the uplink towards the site, framing included.
    pub uplink_wire_bytes: u64,
    pub image_bytes: u64,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn avg_pull_ms(&self) -> f64 {
        if self.pulls.is_empty() {
            return 0.0;
        }
        self.pulls.iter().map(|(_, t)| t).sum::<f64>() / self.pulls.len() as f64
    }
}

/// Runs one repetition: every site node pulls the image, one after another
/// or all at once.
pub fn run_once(
    site: &SiteSpec,
    image: &PreparedImage,
    concurrent: bool,
) -> Result<(Cluster, Vec<(usize, f64)>, f64, Option<String>), BenchError> {
    let mut c = build_site(site, &image.blocks)?;
    c.start();
    c.publish(ORIGIN, IMAGE_NAME, IMAGE_TAG, &image.image)?;
    c.run_for(WARMUP);
    let start = c.now();
    let sites = site_names(site.nodes);
    let clients: Vec<usize> = sites
        .iter()
        .map(|s| {
            let gw = match site.mode {
                Mode::EdgePier => s.as_str(),
                Mode::Baseline => ORIGIN,
            };
            c.add_pull(s, gw, IMAGE_NAME, IMAGE_TAG)
        })
        .collect();
    // Ten times the serialized uplink time, with a floor for small images.
    let serial = image.image_bytes as f64 * 8.0 * site.nodes as f64 / site.uplink.bandwidth_bps as f64;
    let deadline: Timestamp = start + secs(300).max((serial * 10.0 * SECOND as f64) as Micros);
    let mut error = None;
    if concurrent {
        for &cl in &clients {
            c.start_pull(cl, 0);
        }
        let all = clients.clone();
        c.run_until(|c| all.iter().all(|&x| c.pull_finished(x)), deadline);
    } else {
        for &cl in &clients {
            c.start_pull(cl, 0);
            if !c.run_until(|c| c.pull_finished(cl), deadline) {
                break;
            }
            if c.pull_report(cl).error.is_some() {
                break;
            }
        }
    }
    let mut pulls = Vec::new();
    let mut last = start;
    for (i, &cl) in clients.iter().enumerate() {
        let r = c.pull_report(cl);
        match (&r.error, r.finished, r.started) {
            (None, Some(f), Some(s)) => {
                pulls.push((i + 1, (f - s) as f64 / 1000.0));
                last = last.max(f);
            }
            (Some(e), _, _) => {
                error.get_or_insert_with(|| format!("node{}: {e}", i + 1));
            }
            _ => {
                error.get_or_insert_with(|| format!("node{} did not finish", i + 1));
            }
        }
    }
    let distribution_ms = (last - start) as f64 / 1000.0;
    Ok((c, pulls, distribution_ms, error))
}

/// Measures a finished run into a record.
pub fn record(
    scenario: Scenario,
    site: &SiteSpec,
    image: &PreparedImage,
    repetition: usize,
    image_mb: u64,
) -> Result<RunRecord, BenchError> {
    let concurrent = scenario != Scenario::Sequential;
    let (c, pulls, distribution_ms, error) = run_once(site, image, concurrent)?;
    let origin = c.idx(ORIGIN);
    let link = c
        .fabric()
        .link_by_name("uplink-down")
        .expect("edge site has an uplink");
    let first = (WARMUP / SECOND) as usize;
    let end_sec = ((WARMUP as f64 + distribution_ms * 1000.0) / SECOND as f64).ceil() as usize;
    let series = c.fabric().utilization_mbps(link);
    let uplink_mbps: Vec<f64> = (first..end_sec.max(first + 1))
        .map(|s| series.get(s).copied().unwrap_or(0.0))
        .collect();
    let uplink_wire_bytes = (0..c.node_count())
        .filter(|&i| i != origin)
        .map(|i| c.fabric().counters(origin, i).bytes_delivered)
        .sum();
    let origin_bytes = match site.mode {
        Mode::EdgePier => (0..c.node_count())
            .filter(|&i| i != origin)
            .map(|i| c.node_at(i).metrics().bytes_from_origin)
            .sum(),
        Mode::Baseline => c.sim_node(origin).http_body_bytes,
    };
    Ok(RunRecord {
        scenario,
        mode: site.mode,
        bandwidth_mbps: site.uplink.bandwidth_bps as f64 / 1e6,
        repetition,
        image_mb,
        distribution_ms,
        pulls,
        uplink_mbps,
        origin_bytes,
        uplink_wire_bytes,
        image_bytes: image.image_bytes,
        error,
    })
}

/// A full benchmark request.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub scenario: Scenario,
    pub modes: Vec<Mode>,
    pub nodes: usize,
    pub image_mb: u64,
    pub layers: usize,
    pub uplink_mbps: Vec<f64>,
    pub intra_mbps: f64,
    pub reps: usize,
    pub seed: u64,
    /// Image sizes for the size sweep.
    pub sweep_mb: Vec<u64>,
    pub costs: AgentCosts,
    pub chunk_size: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            scenario: Scenario::Sequential,
            modes: vec![Mode::EdgePier, Mode::Baseline],
            nodes: 6,
            image_mb: 50,
            layers: 5,
            uplink_mbps: vec![20.0, 50.0, 100.0, 500.0],
            intra_mbps: 1000.0,
            reps: 10,
            seed: 1,
            sweep_mb: (1..=10).map(|i| i * 10).collect(),
            costs: BENCH_COSTS,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Spec(m.to_string()));
        if self.reps == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.nodes == 0 {
            return bad("need at least one site node");
        }
        if self.image_mb == 0 || self.layers == 0 {
            return bad("image size and layer count must be positive");
        }
        if self.modes.is_empty() {
            return bad("no mode selected");
        }
        if self.uplink_mbps.is_empty() || self.uplink_mbps.iter().any(|b| *b <= 0.0) {
            return bad("uplink bandwidths must be positive");
        }
        if self.scenario == Scenario::SizeSweep && (self.sweep_mb.is_empty() || self.sweep_mb.contains(&0)) {
            return bad("size sweep needs positive sizes");
        }
        Ok(())
    }

    fn site(&self, mode: Mode, uplink: f64, rep: usize) -> SiteSpec {
        let mut s = SiteSpec::new(self.nodes, uplink, self.intra_mbps, mode, self.seed + rep as u64);
        s.costs = self.costs;
        s.chunk_size = self.chunk_size;
        s
    }
}

/// Runs every repetition the spec asks for, one at a time.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<RunRecord>, BenchError> {
    spec.validate()?;
    let mut out = Vec::new();
    let sizes = match spec.scenario {
        Scenario::SizeSweep => spec.sweep_mb.clone(),
        _ => vec![spec.image_mb],
    };
    for &mb in &sizes {
        let image = prepare_image(mb * MB, spec.layers, spec.seed ^ mb, spec.chunk_size)?;
        for &bw in &spec.uplink_mbps {
            for &mode in &spec.modes {
                for rep in 0..spec.reps {
                    let site = spec.site(mode, bw, rep);
                    let r = record(spec.scenario, &site, &image, rep, mb)?;
                    info!(
                        "{} {} {bw} Mbps {mb} MB rep {rep}: {:.0} ms{}",
                        spec.scenario,
                        mode,
                        r.distribution_ms,
                        r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
                    );
                    out.push(r);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct DistributionRow {
    pub scenario: Scenario,
    pub mode: Mode,
    pub bandwidth_mbps: f64,
    pub repetition: usize,
    pub distribution_ms: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PullRow {
    pub scenario: Scenario,
    pub mode: Mode,
    pub bandwidth_mbps: f64,
    pub repetition: usize,
    pub node: usize,
    pub pull_ms: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct UtilRow {
    pub scenario: Scenario,
    pub mode: Mode,
    pub bandwidth_mbps: f64,
    pub repetition: usize,
    pub second: usize,
    pub mbps: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: Mode,
    pub image_mb: u64,
    pub repetition: usize,
    pub avg_pull_ms: f64,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct OriginRow {
    pub scenario: Scenario,
    pub mode: Mode,
    pub bandwidth_mbps: f64,
    pub repetition: usize,
    pub image_mb: u64,
    pub image_bytes: u64,
    pub origin_bytes: u64,
    pub uplink_wire_bytes: u64,
    pub error: String,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the CSV files for `records` into `dir`. Size sweeps produce
/// `size_sweep.csv`; the other scenarios produce the distribution, pull
/// time and utilization files. Every run adds to `origin_bytes.csv`.
pub fn write_csvs(dir: &Path, records: &[RunRecord]) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;
    let (sweep, timed): (Vec<&RunRecord>, Vec<&RunRecord>) =
        records.iter().partition(|r| r.scenario == Scenario::SizeSweep);
    if !timed.is_empty() {
        write_rows(
            &dir.join("distribution_time.csv"),
            timed.iter().map(|r| DistributionRow {
                scenario: r.scenario,
                mode: r.mode,
                bandwidth_mbps: r.bandwidth_mbps,
                repetition: r.repetition,
                distribution_ms: r.distribution_ms,
            }),
        )?;
        write_rows(
            &dir.join("pull_times.csv"),
            timed.iter().flat_map(|r| {
                r.pulls.iter().map(move |(node, ms)| PullRow {
                    scenario: r.scenario,
                    mode: r.mode,
                    bandwidth_mbps: r.bandwidth_mbps,
                    repetition: r.repetition,
                    node: *node,
                    pull_ms: *ms,
                })
            }),
        )?;
        write_rows(
            &dir.join("uplink_util.csv"),
            timed.iter().flat_map(|r| {
                r.uplink_mbps.iter().enumerate().map(move |(second, mbps)| UtilRow {
                    scenario: r.scenario,
                    mode: r.mode,
                    bandwidth_mbps: r.bandwidth_mbps,
                    repetition: r.repetition,
                    second,
                    mbps: *mbps,
                })
            }),
        )?;
    }
    if !sweep.is_empty() {
        write_rows(
            &dir.join("size_sweep.csv"),
            sweep.iter().map(|r| SweepRow {
                mode: r.mode,
                image_mb: r.image_mb,
                repetition: r.repetition,
                avg_pull_ms: r.avg_pull_ms(),
            }),
        )?;
    }
    write_rows(
        &dir.join("origin_bytes.csv"),
        records.iter().map(|r| OriginRow {
            scenario: r.scenario,
            mode: r.mode,
            bandwidth_mbps: r.bandwidth_mbps,
            repetition: r.repetition,
            image_mb: r.image_mb,
            image_bytes: r.image_bytes,
            origin_bytes: r.origin_bytes,
            uplink_wire_bytes: r.uplink_wire_bytes,
            error: r.error.clone().unwrap_or_default(),
        }),
    )?;
    Ok(())
}
