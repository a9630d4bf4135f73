use std::sync::Arc;

use edgepier_core::cas::{MemoryBackend, Store, StoreConfig};
use edgepier_core::gateway::HttpRequest;
use edgepier_core::image::{build_image, BuiltImage};
use edgepier_core::replication::Factor;
use edgepier_core::time::{secs, SECOND};
use edgepier_core::ContentId;
use edgepier_netsim::bench::{build_site, site_names, Mode, SiteSpec, ORIGIN};
use edgepier_netsim::cluster::Cluster;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHUNK: usize = 64 * 1024;
const LIMIT: u64 = 120 * SECOND;

fn layer(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

/// Builds images from layer seeds into a fresh origin backend.
fn origin_with(images: &[(&[u64], usize)]) -> (MemoryBackend, Vec<BuiltImage>) {
    let be = Arc::new(MemoryBackend::new());
    let store = Store::open(
        be.clone(),
        StoreConfig {
            chunk_size: CHUNK,
            capacity: None,
        },
    )
    .unwrap();
    let built = images
        .iter()
        .enumerate()
        .map(|(i, (seeds, len))| {
            let layers: Vec<Vec<u8>> = seeds.iter().map(|s| layer(*s, *len)).collect();
            let refs: Vec<&[u8]> = layers.iter().map(|l| l.as_slice()).collect();
            build_image(&store, &refs, format!("{{\"image\":{i}}}").as_bytes()).unwrap()
        })
        .collect();
    drop(store);
    (be.snapshot(), built)
}

fn spec(nodes: usize, mode: Mode) -> SiteSpec {
    let mut s = SiteSpec::new(nodes, 50.0, 1000.0, mode, 11);
    s.chunk_size = CHUNK;
    s
}

fn site(s: &SiteSpec, images: &[(&[u64], usize)]) -> (Cluster, Vec<BuiltImage>) {
    let (be, built) = origin_with(images);
    let mut c = build_site(s, &be).unwrap();
    c.start();
    for (i, b) in built.iter().enumerate() {
        c.publish(ORIGIN, "lib/app", &format!("v{i}"), b).unwrap();
    }
    c.run_for(SECOND);
    (c, built)
}

fn fetched(c: &Cluster, node: &str) -> u64 {
    let m = c.node(node).metrics();
    m.bytes_from_origin + m.bytes_from_peers
}

#[test]
fn pulled_blobs_match_the_origin_bytes() {
    let (mut c, built) = site(&spec(3, Mode::EdgePier), &[(&[1, 2, 3], 300_000)]);
    let cl = c.add_pull("node1", "node1", "lib/app", "v0");
    c.keep_blobs(cl);
    c.start_pull(cl, 0);
    c.run_until(|c| c.pull_finished(cl), c.now() + LIMIT);
    let r = c.pull_report(cl).clone();
    assert!(r.is_ok(), "{:?}", r.error);
    assert_eq!(r.manifest, Some(built[0].manifest.digest()));
    let origin = c.store(ORIGIN);
    assert_eq!(c.pulled_blobs(cl).len(), 4);
    for (d, bytes) in c.pulled_blobs(cl) {
        let root = origin.resolve_digest(d).unwrap();
        assert_eq!(origin.assemble(&root).unwrap(), bytes.as_ref());
        assert_eq!(ContentId::digest(bytes), *d);
    }
}

#[test]
fn second_node_is_served_by_the_site() {
    let (mut c, _) = site(&spec(3, Mode::EdgePier), &[(&[1, 2, 3], 300_000)]);
    assert!(c.pull("node1", "node1", "lib/app", "v0", LIMIT).is_ok());
    assert!(c.node("node1").metrics().bytes_from_origin > 0);
    let r = c.pull("node2", "node2", "lib/app", "v0", LIMIT);
    assert!(r.is_ok(), "{:?}", r.error);
    let m = c.node("node2").metrics();
    assert_eq!(m.bytes_from_origin, 0);
    assert!(m.bytes_from_peers > 900_000);
    assert!(c.node("node1").metrics().blocks_served > 0);
}

#[test]
fn baseline_pulls_go_to_the_origin() {
    let (mut c, built) = site(&spec(2, Mode::Baseline), &[(&[1, 2], 200_000)]);
    for n in site_names(2) {
        assert!(c.pull(&n, ORIGIN, "lib/app", "v0", LIMIT).is_ok());
        assert_eq!(fetched(&c, &n), 0);
    }
    let size: u64 = built[0].manifest.bytes().len() as u64 + built[0].manifest.blobs().map(|b| b.size).sum::<u64>();
    assert_eq!(c.sim_node(c.idx(ORIGIN)).http_body_bytes, 2 * size);
}

#[test]
fn shared_layers_are_neither_fetched_nor_stored_twice() {
    let len = 256 * 1024;
    let (mut c, built) = site(
        &spec(2, Mode::EdgePier),
        &[(&[1, 2, 3, 4, 5], len), (&[1, 2, 3, 6, 7], len)],
    );
    assert!(c.pull("node1", "node1", "lib/app", "v0", LIMIT).is_ok());
    let before = fetched(&c, "node1");
    let physical_before = c.store("node1").stats().physical_bytes;
    assert!(c.pull("node1", "node1", "lib/app", "v1", LIMIT).is_ok());
    let moved = fetched(&c, "node1") - before;
    let small = built[1].manifest.bytes().len() as u64 + built[1].manifest.config.size;
    let two = 2 * len as u64 + small;
    assert!(moved.abs_diff(two) <= CHUNK as u64, "moved {moved}, two layers {two}");
    let grown = c.store("node1").stats().physical_bytes - physical_before;
    assert!(grown.abs_diff(two) <= CHUNK as u64, "stored {grown} more bytes");
}

#[test]
fn blob_head_moves_no_blocks() {
    let (mut c, built) = site(&spec(2, Mode::EdgePier), &[(&[1, 2], 200_000)]);
    let l = &built[0].manifest.layers[0];
    let m = c.http("node1", "node1", HttpRequest::get("/v2/lib/app/manifests/v0"), LIMIT).unwrap();
    assert_eq!(m.status, 200);
    let after_manifest = fetched(&c, "node1");
    let resp = c
        .http("node1", "node1", HttpRequest::head(format!("/v2/lib/app/blobs/{}", l.digest)), LIMIT)
        .unwrap();
    assert_eq!(resp.status, 200);
    assert_eq!(resp.get_header("Content-Length"), Some(l.size.to_string().as_str()));
    assert_eq!(fetched(&c, "node1"), after_manifest);
    let missing = c
        .http(
            "node1",
            "node1",
            HttpRequest::head(format!("/v2/lib/app/blobs/{}", ContentId::digest(b"nope"))),
            LIMIT,
        )
        .unwrap();
    assert_eq!(missing.status, 404);
}

#[test]
fn corrupt_peer_copy_is_not_accepted() {
    let (mut c, built) = site(&spec(2, Mode::EdgePier), &[(&[1], 400_000)]);
    assert!(c.pull("node1", "node1", "lib/app", "v0", LIMIT).is_ok());
    let store = c.store("node1");
    let root = store.resolve_digest(&built[0].manifest.layers[0].digest).unwrap();
    let leaves = store.walk(&root).unwrap().leaves;
    let be = c.backend("node1");
    for l in &leaves {
        be.tamper(&l.cid, |b| b[0] ^= 1);
    }
    let r = c.pull("node2", "node2", "lib/app", "v0", LIMIT);
    assert!(r.is_ok(), "{:?}", r.error);
    assert!(c.node("node2").metrics().bytes_from_origin > 0);
    assert!(!be.quarantined().is_empty());
}

#[test]
fn unreachable_peer_falls_back_to_origin() {
    let mut s = spec(2, Mode::EdgePier);
    s.seed = 5;
    let (be, built) = origin_with(&[(&[1, 2], 300_000)]);
    let mut c = build_site(&s, &be).unwrap();
    c.start();
    c.publish(ORIGIN, "lib/app", "v0", &built[0]).unwrap();
    c.run_for(SECOND);
    assert!(c.pull("node1", "node1", "lib/app", "v0", LIMIT).is_ok());
    let (n1, n2) = (c.idx("node1"), c.idx("node2"));
    c.fabric_mut().partition(&[n1], &[n2]);
    let r = c.pull("node2", "node2", "lib/app", "v0", LIMIT);
    assert!(r.is_ok(), "{:?}", r.error);
}

fn replicated_site(nodes: usize, factor: Factor) -> (Cluster, Vec<BuiltImage>) {
    let mut s = spec(nodes, Mode::EdgePier);
    s.replication = true;
    s.factor = factor;
    let (mut c, built) = site(&s, &[(&[1, 2, 3], 200_000)]);
    assert!(c.pull("node1", "node1", "lib/app", "v0", LIMIT).is_ok());
    c.run_for(secs(60));
    (c, built)
}

fn cut_origin(c: &mut Cluster) {
    let o = c.idx(ORIGIN);
    let rest: Vec<usize> = (0..c.node_count()).filter(|&i| i != o).collect();
    c.fabric_mut().partition(&[o], &rest);
}

#[test]
fn replicated_site_survives_losing_the_origin() {
    let (mut c, built) = replicated_site(4, Factor::All);
    let d = built[0].manifest.digest();
    for n in site_names(4) {
        assert!(c.node(&n).pinned_images().contains(&d), "{n} did not replicate");
    }
    cut_origin(&mut c);
    for n in site_names(4) {
        let r = c.pull(&n, &n, "lib/app", "v0", LIMIT);
        assert!(r.is_ok(), "{n}: {:?}", r.error);
    }
}

#[test]
fn single_failure_with_two_replicas_keeps_images_available() {
    for victim in site_names(4) {
        let (mut c, _) = replicated_site(4, Factor::N(2));
        cut_origin(&mut c);
        c.crash(&victim);
        let reader = site_names(4).into_iter().find(|n| *n != victim && n != "node1").unwrap();
        let r = c.pull(&reader, &reader, "lib/app", "v0", LIMIT);
        assert!(r.is_ok(), "{victim} down, {reader}: {:?}", r.error);
    }
}

#[test]
fn restart_keeps_content_and_pins() {
    let (mut c, built) = replicated_site(2, Factor::All);
    let d = built[0].manifest.digest();
    c.crash("node2");
    c.run_for(secs(5));
    c.restart("node2").unwrap();
    c.run_for(secs(5));
    assert!(c.node("node2").pinned_images().contains(&d));
    cut_origin(&mut c);
    c.crash("node1");
    let r = c.pull("node2", "node2", "lib/app", "v0", LIMIT);
    assert!(r.is_ok(), "{:?}", r.error);
}

#[test]
fn concurrent_pulls_on_a_fast_uplink_fetch_the_image_about_once() {
    let mut s = SiteSpec::new(4, 1000.0, 1000.0, Mode::EdgePier, 3);
    s.chunk_size = CHUNK;
    let (mut c, built) = site(&s, &[(&[1, 2, 3], 2_000_000)]);
    let clients: Vec<usize> = site_names(4).iter().map(|n| c.add_pull(n, n, "lib/app", "v0")).collect();
    for &cl in &clients {
        c.start_pull(cl, 0);
    }
    let all = clients.clone();
    assert!(c.run_until(|c| all.iter().all(|&x| c.pull_finished(x)), c.now() + LIMIT));
    for &cl in &clients {
        assert!(c.pull_report(cl).is_ok(), "{:?}", c.pull_report(cl).error);
    }
    let size: u64 = built[0].manifest.blobs().map(|b| b.size).sum();
    let from_origin: u64 = site_names(4).iter().map(|n| c.node(n).metrics().bytes_from_origin).sum();
    assert!(from_origin as f64 <= 1.1 * size as f64, "origin sent {from_origin} for {size}");
}
