//! Topology description and its `key = value` config format.
//!
//! ```text
//! [topology]
//! nodes = origin, node1, node2, node3
//! origin = origin
//! default_bandwidth_mbps = 1000
//! default_latency_ms = 1
//! uplink_bandwidth_mbps = 20
//! uplink_latency_ms = 20
//! seed = 7
//! # optional symmetric override: bandwidth_mbps, latency_ms[, drop_prob]
//! link.node1.node2 = 100, 5
//! ```

use std::collections::BTreeMap;
use std::str::FromStr;

use edgepier_core::time::{millis, Micros};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing key `{0}`")]
    Missing(&'static str),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("invalid link shape: {0}")]
    Shape(String),
}

/// Shaping of one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkShape {
    pub bandwidth_bps: u64,
    pub latency: Micros,
    pub drop_prob: f64,
}

impl LinkShape {
    pub fn mbps(mbps: f64, latency_ms: f64) -> Self {
        LinkShape {
            bandwidth_bps: (mbps * 1e6).round() as u64,
            latency: (latency_ms * 1000.0).round() as Micros,
            drop_prob: 0.0,
        }
    }

    pub fn with_drop(mut self, p: f64) -> Self {
        self.drop_prob = p;
        self
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.bandwidth_bps == 0 {
            return Err(TopologyError::Shape("bandwidth must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(TopologyError::Shape(format!(
                "drop probability {} outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// The node behind a constrained uplink and the shape of that uplink.
#[derive(Debug, Clone, PartialEq)]
pub struct Uplink {
    pub origin: String,
    pub shape: LinkShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: Vec<String>,
    pub default: LinkShape,
    pub uplink: Option<Uplink>,
    /// Directed overrides; the parser inserts both directions.
    pub overrides: BTreeMap<(String, String), LinkShape>,
    pub seed: u64,
}

impl Topology {
    pub fn new(nodes: Vec<String>, default: LinkShape) -> Self {
        Topology {
            nodes,
            default,
            uplink: None,
            overrides: BTreeMap::new(),
            seed: 0,
        }
    }

    /// An edge site: `origin` behind an uplink plus `sites` on a fast LAN.
    pub fn edge_site(origin: &str, sites: &[String], intra: LinkShape, uplink: LinkShape, seed: u64) -> Self {
        let mut nodes = vec![origin.to_string()];
        nodes.extend(sites.iter().cloned());
        Topology {
            nodes,
            default: intra,
            uplink: Some(Uplink {
                origin: origin.to_string(),
                shape: uplink,
            }),
            overrides: BTreeMap::new(),
            seed,
        }
    }

    pub fn with_override(mut self, a: &str, b: &str, shape: LinkShape) -> Self {
        self.overrides.insert((a.to_string(), b.to_string()), shape);
        self.overrides.insert((b.to_string(), a.to_string()), shape);
        self
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n) {
                return Err(TopologyError::DuplicateNode(n.clone()));
            }
        }
        self.default.validate()?;
        if let Some(u) = &self.uplink {
            if !seen.contains(&u.origin) {
                return Err(TopologyError::UnknownNode(u.origin.clone()));
            }
            u.shape.validate()?;
        }
        for ((a, b), s) in &self.overrides {
            for n in [a, b] {
                if !seen.contains(n) {
                    return Err(TopologyError::UnknownNode(n.clone()));
                }
            }
            s.validate()?;
        }
        Ok(())
    }

    /// Shape governing traffic from `a` to `b`.
    pub fn shape(&self, a: &str, b: &str) -> LinkShape {
        if let Some(s) = self.overrides.get(&(a.to_string(), b.to_string())) {
            return *s;
        }
        match &self.uplink {
            Some(u) if u.origin == a || u.origin == b => u.shape,
            _ => self.default,
        }
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, TopologyError> {
    v.trim().parse().map_err(|_| TopologyError::Syntax {
        line,
        msg: format!("`{key}` expects a number, got {v:?}"),
    })
}

impl FromStr for Topology {
    type Err = TopologyError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut links = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap().trim();
            if l.is_empty() || (l.starts_with('[') && l.ends_with(']')) {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| TopologyError::Syntax {
                line,
                msg: format!("expected key = value, got {l:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(pair) = k.strip_prefix("link.") {
                links.push((line, pair.to_string(), v.to_string()));
            } else {
                kv.insert(k.to_string(), (line, v.to_string()));
            }
        }
        let get = |k: &'static str| kv.get(k).map(|(l, v)| (*l, v.as_str()));
        let (_, nodes) = get("nodes").ok_or(TopologyError::Missing("nodes"))?;
        let nodes: Vec<String> = nodes
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        let f64_or = |k: &'static str, dflt: f64| -> Result<f64, TopologyError> {
            match get(k) {
                Some((l, v)) => num(l, k, v),
                None => Ok(dflt),
            }
        };
        let bw = f64_or("default_bandwidth_mbps", 1000.0)?;
        let lat = f64_or("default_latency_ms", 1.0)?;
        let drop = f64_or("drop_prob", 0.0)?;
        let up_lat = f64_or("uplink_latency_ms", 20.0)?;
        let up_bw = match get("uplink_bandwidth_mbps") {
            Some((l, v)) => Some(num::<f64>(l, "uplink_bandwidth_mbps", v)?),
            None => None,
        };
        let seed = match get("seed") {
            Some((l, v)) => num(l, "seed", v)?,
            None => 0,
        };
        let origin = get("origin").map(|(_, v)| v.to_string());
        let uplink = match (origin, up_bw) {
            (Some(o), Some(b)) => Some(Uplink {
                origin: o,
                shape: LinkShape::mbps(b, up_lat),
            }),
            (Some(o), None) => Some(Uplink {
                origin: o,
                shape: LinkShape::mbps(bw, up_lat),
            }),
            (None, Some(_)) => return Err(TopologyError::Missing("origin")),
            (None, None) => None,
        };
        let mut topo = Topology {
            nodes,
            default: LinkShape::mbps(bw, lat).with_drop(drop),
            uplink,
            overrides: BTreeMap::new(),
            seed,
        };
        for (line, pair, v) in links {
            let (a, b) = pair.split_once('.').ok_or_else(|| TopologyError::Syntax {
                line,
                msg: format!("link key needs two node names, got {pair:?}"),
            })?;
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() < 2 || parts.len() > 3 {
                return Err(TopologyError::Syntax {
                    line,
                    msg: "link value is bandwidth_mbps, latency_ms[, drop_prob]".into(),
                });
            }
            let mut s = LinkShape::mbps(num(line, "bandwidth", parts[0])?, num(line, "latency", parts[1])?);
            if let Some(p) = parts.get(2) {
                s.drop_prob = num(line, "drop_prob", p)?;
            }
            topo = topo.with_override(a, b, s);
        }
        topo.validate()?;
        Ok(topo)
    }
}

/// Default latency added on intra-site links.
pub const INTRA_LATENCY: Micros = millis(1);
/// Default latency added on the uplink.
pub const UPLINK_LATENCY: Micros = millis(20);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let t: Topology = "[topology]\nnodes = origin, a, b\norigin = origin\n\
            default_bandwidth_mbps = 1000\nuplink_bandwidth_mbps = 20 # shaped\n\
            seed = 9\nlink.a.b = 100, 5\n"
            .parse()
            .unwrap();
        assert_eq!(t.nodes, ["origin", "a", "b"]);
        assert_eq!(t.seed, 9);
        assert_eq!(t.shape("origin", "a").bandwidth_bps, 20_000_000);
        assert_eq!(t.shape("a", "origin").latency, UPLINK_LATENCY);
        assert_eq!(t.shape("b", "a").bandwidth_bps, 100_000_000);
        assert_eq!(t.shape("b", "a").latency, millis(5));
    }

    #[test]
    fn defaults_and_errors() {
        let t: Topology = "nodes = x, y".parse().unwrap();
        assert_eq!(t.shape("x", "y").latency, INTRA_LATENCY);
        assert_eq!(t.shape("x", "y").bandwidth_bps, 1_000_000_000);
        assert_eq!("seed = 1".parse::<Topology>(), Err(TopologyError::Missing("nodes")));
        assert!(matches!("nodes = a\nbogus".parse::<Topology>(), Err(TopologyError::Syntax { line: 2, .. })));
        assert!(matches!("nodes = a\nlink.a.q = 1, 1".parse::<Topology>(), Err(TopologyError::UnknownNode(_))));
        assert!(matches!("nodes = a, a".parse::<Topology>(), Err(TopologyError::DuplicateNode(_))));
        assert!(matches!(
            "nodes = a\ndefault_bandwidth_mbps = 0".parse::<Topology>(),
            Err(TopologyError::Shape(_))
        ));
    }
}
