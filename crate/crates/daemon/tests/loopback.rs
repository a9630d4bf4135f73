use std::net::{SocketAddr, TcpListener as StdListener};
use std::time::{Duration, Instant};

use bytes::Bytes;
use edgepier_core::peer::PeerId;
use edgepier_core::wire::{FrameDecoder, Message};
use edgepier_daemon::config::{peer_line, DaemonConfig};
use edgepier_daemon::{Daemon, DaemonError, RegistryClient};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use tokio::io::AsyncReadExt;

fn free_addr() -> SocketAddr {
    StdListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

fn random(seed: u64, len: usize) -> Bytes {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    Bytes::from(v)
}

fn layers(seed: u64, n: usize, len: usize) -> Vec<Bytes> {
    (0..n).map(|i| random(seed + i as u64, len)).collect()
}

/// Configs for a site of `n` nodes that all know each other.
fn site(n: usize, dirs: &[TempDir]) -> Vec<DaemonConfig> {
    let p2p: Vec<SocketAddr> = (0..n).map(|_| free_addr()).collect();
    let members: Vec<String> = p2p.iter().map(|a| a.to_string()).collect();
    p2p.iter()
        .zip(dirs)
        .map(|(a, d)| {
            let mut c = DaemonConfig::new(free_addr(), *a, d.path());
            c.members = members.clone();
            c.chunk_size = 64 * 1024;
            c
        })
        .collect()
}

fn dirs(n: usize) -> Vec<TempDir> {
    (0..n).map(|_| tempfile::tempdir().unwrap()).collect()
}

async fn wait_for<F, Fut>(limit: Duration, mut check: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let start = Instant::now();
    while start.elapsed() < limit {
        if check().await {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    false
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn push_then_pull_returns_the_same_bytes() {
    let d = dirs(1);
    let node = Daemon::start(site(1, &d).remove(0)).await.unwrap();
    let c = node.client();
    c.ping().await.unwrap();
    let ls = layers(1, 3, 200_000);
    let cfg = Bytes::from_static(b"{\"architecture\":\"amd64\"}");
    let digest = c.push("lib/app", "v1", &ls, cfg.clone()).await.unwrap();
    let pulled = c.pull("lib/app", "v1").await.unwrap();
    assert_eq!(pulled.manifest.digest(), digest);
    assert_eq!(pulled.layers, ls);
    assert_eq!(pulled.config, cfg);
    let by_digest = c.pull("lib/app", &digest.to_string()).await.unwrap();
    assert_eq!(by_digest.layers, ls);

    let err = c.pull("lib/app", "nope").await.unwrap_err();
    assert_eq!(err.code(), Some("MANIFEST_UNKNOWN"), "{err}");
    node.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn head_reports_length_without_a_body() {
    let d = dirs(1);
    let node = Daemon::start(site(1, &d).remove(0)).await.unwrap();
    let c = node.client();
    let ls = layers(2, 1, 150_000);
    let digest = c.push("app", "v1", &ls, Bytes::from_static(b"{}")).await.unwrap();
    let m = c.manifest("app", &digest.to_string()).await.unwrap();
    let url = format!("http://{}/v2/app/blobs/{}", node.http_addr(), m.layers[0].digest);
    let (status, len, body) = tokio::task::spawn_blocking(move || {
        let r = ureq::head(&url).call().unwrap();
        let status = r.status();
        let len = r.header("Content-Length").map(str::to_string);
        let mut body = Vec::new();
        std::io::Read::read_to_end(&mut r.into_reader(), &mut body).unwrap();
        (status, len, body)
    })
    .await
    .unwrap();
    assert_eq!(status, 200);
    assert_eq!(len.as_deref(), Some("150000"));
    assert!(body.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn occupied_port_is_a_bind_error() {
    let taken = StdListener::bind("127.0.0.1:0").unwrap();
    let d = dirs(1);
    let cfg = DaemonConfig::new(free_addr(), taken.local_addr().unwrap(), d[0].path());
    match Daemon::start(cfg).await {
        Err(DaemonError::Bind { addr, .. }) => assert_eq!(addr, taken.local_addr().unwrap()),
        Err(e) => panic!("wrong error: {e}"),
        Ok(_) => panic!("started on an occupied port"),
    }
}

#[test]
fn missing_peers_file_fails_startup() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("node.conf");
    std::fs::write(&path, "http = 127.0.0.1:0\np2p = 127.0.0.1:7999\nstore = data\npeers = absent.txt\n").unwrap();
    match DaemonConfig::load(&path) {
        Err(DaemonError::Config(msg)) => assert!(msg.contains("absent.txt"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    let peers = d.path().join("peers.txt");
    std::fs::write(&peers, format!("{}\n", peer_line("127.0.0.1:7998"))).unwrap();
    std::fs::write(&path, "http = 127.0.0.1:0\np2p = 127.0.0.1:7999\nstore = data\npeers = peers.txt\n").unwrap();
    let cfg = DaemonConfig::load(&path).unwrap();
    assert_eq!(cfg.members, vec!["127.0.0.1:7998", "127.0.0.1:7999"]);
    assert_eq!(cfg.store, d.path().join("data"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn members_are_greeted_with_hello() {
    let fake = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let d = dirs(1);
    let mut cfg = DaemonConfig::new(free_addr(), free_addr(), d[0].path());
    cfg.members.push(fake.local_addr().unwrap().to_string());
    let me = cfg.addr();
    let _node = Daemon::start(cfg).await.unwrap();
    let (mut s, _) = tokio::time::timeout(Duration::from_secs(5), fake.accept())
        .await
        .expect("daemon never connected")
        .unwrap();
    let mut dec = FrameDecoder::new();
    let mut buf = [0u8; 4096];
    let first = loop {
        let n = s.read(&mut buf).await.unwrap();
        assert!(n > 0, "connection closed before HELLO");
        dec.extend(&buf[..n]);
        if let Some(m) = dec.next_message().unwrap() {
            break m;
        }
    };
    assert_eq!(
        first,
        Message::Hello {
            peer: PeerId::from_addr(&me),
            addr: me
        }
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn push_to_one_pins_on_all_three() {
    let d = dirs(3);
    let mut nodes = Vec::new();
    for c in site(3, &d) {
        nodes.push(Daemon::start(c).await.unwrap());
    }
    let digest = nodes[0]
        .client()
        .push("edge/app", "v1", &layers(3, 2, 300_000), Bytes::from_static(b"{}"))
        .await
        .unwrap();
    let all_pinned = wait_for(Duration::from_secs(30), || {
        let nodes = &nodes;
        async move {
            for n in nodes {
                if !n.status().await.unwrap().pinned_images.contains(&digest) {
                    return false;
                }
            }
            true
        }
    })
    .await;
    assert!(all_pinned, "not every node pinned the image within 30 s");
    let pulled = nodes[2].client().pull("edge/app", "v1").await.unwrap();
    assert_eq!(pulled.manifest.digest(), digest);
    for n in nodes {
        n.shutdown().await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn site_pulls_through_a_peer_then_survives_losing_the_origin() {
    let d = dirs(3);
    let origin_cfg = DaemonConfig::new(free_addr(), free_addr(), d[0].path());
    let origin = Daemon::start(origin_cfg).await.unwrap();
    let mut cfgs = site(2, &d[1..]);
    for c in &mut cfgs {
        c.origin = Some(origin.p2p_addr().to_string());
    }
    let ls = layers(4, 3, 250_000);
    let digest = origin.client().push("lib/web", "v2", &ls, Bytes::from_static(b"{}")).await.unwrap();
    let a = Daemon::start(cfgs.remove(0)).await.unwrap();
    let b = Daemon::start(cfgs.remove(0)).await.unwrap();

    let first = a.client().pull("lib/web", "v2").await.unwrap();
    assert_eq!(first.layers, ls);
    assert!(a.status().await.unwrap().metrics.bytes_from_origin > 0);
    let replicated = wait_for(Duration::from_secs(30), || async {
        b.status().await.unwrap().pinned_images.contains(&digest)
    })
    .await;
    assert!(replicated, "second site node never replicated the image");

    origin.shutdown().await;
    for n in [&a, &b] {
        let p = n.client().pull("lib/web", "v2").await.unwrap();
        assert_eq!(p.layers, ls);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn killed_mid_fetch_resumes_from_an_intact_store() {
    let d = dirs(2);
    let origin = Daemon::start(DaemonConfig::new(free_addr(), free_addr(), d[0].path()))
        .await
        .unwrap();
    let ls = layers(5, 4, 2_000_000);
    origin.client().push("big/app", "v1", &ls, Bytes::from_static(b"{}")).await.unwrap();

    let mut cfg = DaemonConfig::new(free_addr(), free_addr(), d[1].path());
    cfg.origin = Some(origin.p2p_addr().to_string());
    cfg.chunk_size = 64 * 1024;
    let node = Daemon::start(cfg.clone()).await.unwrap();
    let client = node.client();
    let pull = tokio::spawn(async move { client.pull("big/app", "v1").await });
    let partial = wait_for(Duration::from_secs(30), || async {
        node.status().await.map(|s| s.stored_bytes > 1_000_000).unwrap_or(false)
    })
    .await;
    assert!(partial, "fetch never got going");
    node.kill().await;
    let _ = pull.await;

    let node = Daemon::start(cfg).await.unwrap();
    let p = node.client().pull("big/app", "v1").await.unwrap();
    assert_eq!(p.layers, ls);
    assert_eq!(node.status().await.unwrap().metrics.rejected_blocks, 0);
    node.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn clean_restart_keeps_pins_and_tags() {
    let d = dirs(1);
    let cfg = site(1, &d).remove(0);
    let node = Daemon::start(cfg.clone()).await.unwrap();
    let ls = layers(6, 2, 100_000);
    let digest = node.client().push("keep/me", "v1", &ls, Bytes::from_static(b"{}")).await.unwrap();
    node.shutdown().await;

    let node = Daemon::start(cfg).await.unwrap();
    assert!(node.status().await.unwrap().pinned_images.contains(&digest));
    let p = RegistryClient::new(&node.http_addr().to_string()).pull("keep/me", "v1").await.unwrap();
    assert_eq!(p.layers, ls);
}
