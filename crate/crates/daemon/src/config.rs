//! Daemon configuration and the site peers file.
//!
//! Both are plain text. The config holds one `key = value` per line; the
//! peers file holds one `peer_id=address` per line, where the id is the hex
//! SHA-256 of the address. `#` starts a comment in either.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use edgepier_core::cas::DEFAULT_CHUNK_SIZE;
use edgepier_core::peer::PeerId;
use edgepier_core::replication::Factor;

use crate::DaemonError;

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    /// Registry V2 gateway.
    pub http: SocketAddr,
    /// Peer protocol listener. Its string form is the node's identity.
    pub p2p: SocketAddr,
    pub store: PathBuf,
    /// Site members, this node included.
    pub members: Vec<String>,
    /// Peer address of the upstream registry node, if any.
    pub origin: Option<String>,
    pub cache_bytes: Option<u64>,
    pub factor: Factor,
    pub replication: bool,
    pub chunk_size: usize,
}

impl DaemonConfig {
    /// A standalone node with defaults for everything but its addresses.
    pub fn new(http: SocketAddr, p2p: SocketAddr, store: impl Into<PathBuf>) -> Self {
        DaemonConfig {
            http,
            p2p,
            store: store.into(),
            members: vec![p2p.to_string()],
            origin: None,
            cache_bytes: None,
            factor: Factor::All,
            replication: true,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }

    pub fn addr(&self) -> String {
        self.p2p.to_string()
    }

    /// Reads a config file. Relative paths inside it are taken from the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DaemonError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| DaemonError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, DaemonError> {
        let bad = |line: usize, why: String| DaemonError::Config(format!("line {line}: {why}"));
        let mut http = None;
        let mut p2p: Option<SocketAddr> = None;
        let mut store = None;
        let mut peers = None;
        let mut origin = None;
        let mut cache_bytes = None;
        let mut factor = Factor::All;
        let mut replication = true;
        let mut chunk_size = DEFAULT_CHUNK_SIZE;
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(n, format!("expected key = value, got {line:?}")))?;
            let addr = |v: &str| v.parse::<SocketAddr>().map_err(|e| bad(n, format!("{k}: {e}")));
            match k {
                "http" => http = Some(addr(v)?),
                "p2p" => p2p = Some(addr(v)?),
                "store" => store = Some(base.join(v)),
                "peers" => peers = Some(base.join(v)),
                "origin" => origin = Some(addr(v)?.to_string()),
                "cache_bytes" => {
                    let b: u64 = v.parse().map_err(|e| bad(n, format!("{k}: {e}")))?;
                    cache_bytes = (b > 0).then_some(b);
                }
                "factor" => factor = v.parse().map_err(|e| bad(n, e))?,
                "replication" => replication = v.parse().map_err(|e| bad(n, format!("{k}: {e}")))?,
                "chunk_size" => {
                    chunk_size = v.parse().map_err(|e| bad(n, format!("{k}: {e}")))?;
                    if chunk_size == 0 {
                        return Err(bad(n, "chunk_size must be positive".into()));
                    }
                }
                _ => return Err(bad(n, format!("unknown key {k:?}"))),
            }
        }
        let need = |name: &str| DaemonError::Config(format!("missing required key {name:?}"));
        let http = http.ok_or_else(|| need("http"))?;
        let p2p = p2p.ok_or_else(|| need("p2p"))?;
        let store = store.ok_or_else(|| need("store"))?;
        let mut members = match peers {
            Some(p) => read_peers(&p)?,
            None => Vec::new(),
        };
        let me = p2p.to_string();
        if !members.contains(&me) {
            members.push(me);
        }
        Ok(DaemonConfig {
            http,
            p2p,
            store,
            members,
            origin,
            cache_bytes,
            factor,
            replication,
            chunk_size,
        })
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Addresses listed in a peers file, in file order.
pub fn read_peers(path: &Path) -> Result<Vec<String>, DaemonError> {
    let text = fs::read_to_string(path)
        .map_err(|e| DaemonError::Config(format!("peers file {}: {e}", path.display())))?;
    parse_peers(&text)
}

pub fn parse_peers(text: &str) -> Result<Vec<String>, DaemonError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| DaemonError::Config(format!("peers line {}: {why}", i + 1));
        let (id, addr) = line.split_once('=').ok_or_else(|| bad("expected peer_id=address"))?;
        let (id, addr) = (id.trim(), addr.trim());
        addr.parse::<SocketAddr>().map_err(|_| bad("address is not host:port"))?;
        let id = PeerId::from_hex(id).ok_or_else(|| bad("peer id is not 64 hex digits"))?;
        if id != PeerId::from_addr(addr) {
            return Err(bad("peer id does not match the address"));
        }
        if !out.iter().any(|a| a == addr) {
            out.push(addr.to_string());
        }
    }
    Ok(out)
}

/// The peers-file line for `addr`.
pub fn peer_line(addr: &str) -> String {
    format!("{}={addr}", PeerId::from_addr(addr).to_hex())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let c = DaemonConfig::parse(
            "http = 127.0.0.1:5000\np2p=127.0.0.1:7000 # me\nstore = data\nfactor = 2\n",
            Path::new("/etc/ep"),
        )
        .unwrap();
        assert_eq!(c.store, PathBuf::from("/etc/ep/data"));
        assert_eq!(c.members, vec!["127.0.0.1:7000".to_string()]);
        assert_eq!(c.factor, Factor::N(2));
        assert!(c.origin.is_none());
    }

    #[test]
    fn config_errors() {
        let base = Path::new(".");
        assert!(DaemonConfig::parse("http = 127.0.0.1:1\nstore = x", base).is_err());
        assert!(DaemonConfig::parse("bogus = 1", base).is_err());
        assert!(DaemonConfig::parse("http 127.0.0.1:1", base).is_err());
        assert!(DaemonConfig::parse("http = nowhere", base).is_err());
    }

    #[test]
    fn peers_round_trip() {
        let text = format!("# site\n{}\n\n{}\n", peer_line("127.0.0.1:1"), peer_line("127.0.0.1:2"));
        assert_eq!(parse_peers(&text).unwrap(), vec!["127.0.0.1:1", "127.0.0.1:2"]);
        let forged = format!("{}=127.0.0.1:3", PeerId::from_addr("127.0.0.1:1").to_hex());
        assert!(parse_peers(&forged).is_err());
        assert!(parse_peers("abc=127.0.0.1:3").is_err());
    }
}
