use std::collections::BTreeSet;
use std::sync::Arc;

use edgepier_core::cas::{chunk_bytes, DiskBackend, MemoryBackend, Store, StoreConfig};
use edgepier_core::{CasError, ContentId};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const KIB: usize = 1024;

fn random(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

fn store(chunk: usize, capacity: Option<u64>) -> (Arc<MemoryBackend>, Store) {
    let be = Arc::new(MemoryBackend::new());
    let s = Store::open(be.clone(), StoreConfig { chunk_size: chunk, capacity }).unwrap();
    (be, s)
}

fn sha(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

#[test]
fn block_id_matches_an_independent_sha256() {
    let (_, s) = store(256 * KIB, None);
    let data = random(1, 64 * KIB);
    let cid = s.put_block(&data).unwrap();
    assert_eq!(cid.as_bytes(), &sha(&data));
    assert_eq!(s.get_block(&cid).unwrap().as_ref(), data.as_slice());
}

#[test]
fn repeated_put_stores_once() {
    let (_, s) = store(256 * KIB, None);
    let a = s.put_block(b"a").unwrap();
    let before = s.stats().unique_blocks;
    assert_eq!(s.put_block(b"a").unwrap(), a);
    assert_eq!(s.stats().unique_blocks, before);
    assert_ne!(s.put_block(b"b").unwrap(), a);
    let unknown = ContentId::digest(b"never stored");
    assert!(matches!(s.get_block(&unknown), Err(CasError::NotFound(_))));
}

#[test]
fn n_copies_of_a_blob_cost_one() {
    let (_, s) = store(64 * KIB, None);
    let data = random(2, 700 * KIB);
    let first = chunk_bytes(&s, &data, 64 * KIB).unwrap();
    let one = s.stats().physical_bytes;
    for _ in 0..5 {
        assert_eq!(chunk_bytes(&s, &data, 64 * KIB).unwrap(), first);
    }
    let st = s.stats();
    assert_eq!(st.physical_bytes, one);
    assert!(st.physical_bytes as f64 <= data.len() as f64 * 1.01);
    assert!(st.physical_bytes <= st.logical_bytes);
}

#[test]
fn file_digest_and_sizes_follow_the_leaves() {
    let (_, s) = store(64 * KIB, None);
    let data = random(3, 333_333);
    let f = chunk_bytes(&s, &data, 64 * KIB).unwrap();
    assert_eq!(f.file_digest.as_bytes(), &sha(&data));
    assert_eq!(f.leaves.iter().map(|l| l.size).sum::<u64>(), data.len() as u64);
    let walk = s.walk(&f.root).unwrap();
    assert_eq!(walk.root.total_size, data.len() as u64);
    let mut joined = Vec::new();
    for l in &walk.leaves {
        joined.extend_from_slice(&s.get_block(&l.cid).unwrap());
    }
    assert_eq!(joined, data);
}

#[test]
fn deleted_leaf_is_named_as_missing() {
    let (be, s) = store(64 * KIB, None);
    let data = random(4, 300 * KIB);
    let f = chunk_bytes(&s, &data, 64 * KIB).unwrap();
    let victim = f.leaves[2].cid;
    be.vanish(&victim);
    assert!(s.get_block(&victim).is_err());
    assert_eq!(s.missing(&f.root), vec![victim]);
    assert!(s.assemble(&f.root).is_err());
}

#[test]
fn garbage_leaf_is_never_returned() {
    let (be, s) = store(64 * KIB, None);
    let data = random(5, 200 * KIB);
    let f = chunk_bytes(&s, &data, 64 * KIB).unwrap();
    let victim = f.leaves[1].cid;
    be.tamper(&victim, |b| {
        let n = b.len();
        *b = random(99, n);
    });
    match s.assemble(&f.root) {
        Err(CasError::Integrity(c)) => assert_eq!(c, victim),
        Err(CasError::DigestMismatch { .. }) => {}
        other => panic!("corruption went unnoticed: {other:?}"),
    }
    assert_eq!(be.quarantined(), vec![victim]);
}

#[test]
fn every_single_byte_flip_is_detected() {
    let (be, s) = store(4 * KIB, None);
    let data = random(6, 512);
    let cid = s.put_block(&data).unwrap();
    for i in 0..data.len() {
        for bit in [0x01u8, 0x80] {
            let (be2, s2) = store(4 * KIB, None);
            s2.put_block(&data).unwrap();
            be2.tamper(&cid, |b| b[i] ^= bit);
            assert!(matches!(s2.get_block(&cid), Err(CasError::Integrity(_))), "byte {i} bit {bit:#x}");
        }
    }
    assert_eq!(s.get_block(&cid).unwrap().as_ref(), data.as_slice());
    assert!(be.quarantined().is_empty());
}

#[test]
fn sampled_flips_in_large_blocks_are_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = random(7, 1024 * KIB);
    for _ in 0..32 {
        let (be, s) = store(1024 * KIB, None);
        let cid = s.put_block(&data).unwrap();
        let at = rng.random_range(0..data.len());
        be.tamper(&cid, |b| b[at] ^= 1 << rng.random_range(0..8));
        assert!(s.get_block(&cid).is_err());
    }
}

#[test]
fn shared_layer_survives_unpinning_one_image() {
    let (_, s) = store(64 * KIB, Some(2_000 * KIB as u64));
    let base = random(10, 256 * KIB);
    let a_top = random(11, 256 * KIB);
    let b_top = random(12, 256 * KIB);
    let base_f = chunk_bytes(&s, &base, 64 * KIB).unwrap();
    let a = chunk_bytes(&s, &a_top, 64 * KIB).unwrap();
    let b = chunk_bytes(&s, &b_top, 64 * KIB).unwrap();
    // "Image A" = base + a_top, "image B" = base + b_top.
    for r in [base_f.root, a.root, base_f.root, b.root] {
        s.pin(&r).unwrap();
    }
    s.unpin(&base_f.root).unwrap();
    s.unpin(&a.root).unwrap();
    // Fill well past capacity with unpinned data.
    for i in 0..12 {
        chunk_bytes(&s, &random(100 + i, 256 * KIB), 64 * KIB).unwrap();
    }
    assert!(s.is_complete(&base_f.root), "base still pinned once");
    assert!(s.is_complete(&b.root));
    assert!(!s.is_complete(&a.root), "unpinned top layer was evicted");
    assert!(s.stats().physical_bytes <= 2_000 * KIB as u64);
}

#[test]
fn full_store_of_pins_refuses_more() {
    let (_, s) = store(64 * KIB, Some(300 * KIB as u64));
    let f = chunk_bytes(&s, &random(20, 250 * KIB), 64 * KIB).unwrap();
    s.pin(&f.root).unwrap();
    let err = chunk_bytes(&s, &random(21, 200 * KIB), 64 * KIB).unwrap_err();
    assert!(matches!(err, CasError::Capacity { .. }));
    assert!(s.is_complete(&f.root));
}

#[test]
fn disk_store_keeps_blocks_and_pins_across_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = StoreConfig {
        chunk_size: 64 * KIB,
        capacity: None,
    };
    let data = random(30, 400 * KIB);
    let (root, digest, leaf) = {
        let s = Store::open(Arc::new(DiskBackend::open(dir.path()).unwrap()), cfg.clone()).unwrap();
        let f = chunk_bytes(&s, &data, 64 * KIB).unwrap();
        s.pin(&f.root).unwrap();
        (f.root, f.file_digest, f.leaves[0].cid)
    };
    let be = Arc::new(DiskBackend::open(dir.path()).unwrap());
    let s = Store::open(be.clone(), cfg.clone()).unwrap();
    assert!(s.is_pinned(&root));
    assert_eq!(s.resolve_digest(&digest), Some(root));
    assert_eq!(s.assemble(&root).unwrap(), data);

    let path = be.block_path(&leaf);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(s.get_block(&leaf), Err(CasError::Integrity(_))));
    assert!(s.assemble(&root).is_err());
}

fn chunk_size() -> impl Strategy<Value = usize> {
    prop_oneof![Just(64 * KIB), Just(256 * KIB), Just(1024 * KIB)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assemble_inverts_chunking(len in 0usize..=8 * 1024 * KIB, chunk in chunk_size(), seed in any::<u64>()) {
        let (_, s) = store(chunk, None);
        let data = random(seed, len);
        let f = chunk_bytes(&s, &data, chunk).unwrap();
        prop_assert_eq!(f.total_size, len as u64);
        prop_assert_eq!(f.file_digest.as_bytes(), &sha(&data));
        prop_assert!(f.leaves.iter().all(|l| l.size as usize <= chunk));
        prop_assert_eq!(s.assemble(&f.root).unwrap(), data);
    }

    #[test]
    fn stored_blocks_hash_to_their_id(data in prop::collection::vec(any::<u8>(), 0..4096)) {
        let (_, s) = store(64 * KIB, None);
        let cid = s.put_block(&data).unwrap();
        prop_assert_eq!(&sha(&s.get_block(&cid).unwrap()), cid.as_bytes());
    }

    #[test]
    fn pinned_dags_survive_any_pressure(
        sizes in prop::collection::vec(1usize..200 * KIB, 2..8),
        pinned in prop::collection::btree_set(0usize..8, 1..3),
        pressure in prop::collection::vec(1usize..300 * KIB, 1..10),
    ) {
        let (_, s) = store(64 * KIB, Some(1_500 * KIB as u64));
        let mut roots = Vec::new();
        let mut pins = BTreeSet::new();
        for (i, n) in sizes.iter().enumerate() {
            let Ok(f) = chunk_bytes(&s, &random(i as u64, *n), 64 * KIB) else { continue };
            if pinned.contains(&i) && s.pin(&f.root).is_ok() {
                pins.insert(f.root);
            }
            roots.push(f.root);
        }
        for (i, n) in pressure.iter().enumerate() {
            let _ = chunk_bytes(&s, &random(1000 + i as u64, *n), 64 * KIB);
        }
        for r in &pins {
            prop_assert!(s.is_complete(r));
        }
        let st = s.stats();
        prop_assert!(st.physical_bytes <= 1_500 * KIB as u64);
        prop_assert!(st.physical_bytes <= st.logical_bytes);
    }
}
