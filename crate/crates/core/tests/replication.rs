use edgepier_core::peer::PeerId;
use edgepier_core::replication::{place_replicas, Factor, PinEntry, PinsetState, Replica, TagRecord};
use edgepier_core::ContentId;
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn peer(n: u8) -> PeerId {
    PeerId::from_addr(&format!("node{n}"))
}

fn cid(n: u8) -> ContentId {
    ContentId::digest(&[n])
}

fn factor() -> impl Strategy<Value = Factor> {
    prop_oneof![Just(Factor::All), (1u32..5).prop_map(Factor::N)]
}

fn state() -> impl Strategy<Value = PinsetState> {
    let pins = prop::collection::btree_set(
        (0u8..6, factor(), 0u64..8, 0u8..4).prop_map(|(d, factor, lamport, w)| PinEntry {
            digest: cid(d),
            factor,
            lamport,
            writer: peer(w),
        }),
        0..6,
    );
    let tags = prop::collection::btree_map(
        (0u8..3).prop_map(|t| ("app".to_string(), format!("v{t}"))),
        (0u8..6, 0u64..8, 0u8..4).prop_map(|(d, lamport, w)| TagRecord {
            digest: cid(d),
            lamport,
            writer: peer(w),
        }),
        0..3,
    );
    (pins, tags).prop_map(|(pins, tags)| PinsetState { pins, tags })
}

fn join(a: &PinsetState, b: &PinsetState) -> PinsetState {
    let mut x = a.clone();
    x.merge(b);
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn merge_is_a_semilattice(a in state(), b in state(), c in state()) {
        prop_assert_eq!(join(&a, &b), join(&b, &a));
        prop_assert_eq!(join(&join(&a, &b), &c), join(&a, &join(&b, &c)));
        prop_assert_eq!(join(&a, &a), a.clone());
        prop_assert!(!join(&a, &b).pins.is_empty() || (a.pins.is_empty() && b.pins.is_empty()));
        let mut again = join(&a, &b);
        prop_assert!(!again.merge(&b).changed());
    }
}

#[test]
fn thousand_orderings_reach_one_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let states: Vec<PinsetState> = (0..8)
        .map(|_| state().new_tree(&mut runner).unwrap().current())
        .collect();
    let fold = |order: &[usize]| {
        let mut acc = PinsetState::default();
        for &i in order {
            acc.merge(&states[i]);
        }
        acc
    };
    let mut order: Vec<usize> = (0..states.len()).collect();
    let reference = fold(&order);
    for _ in 0..1000 {
        order.shuffle(&mut rng);
        // Re-deliveries must not matter either.
        let mut with_dupes = order.clone();
        with_dupes.push(order[rng.random_range(0..order.len())]);
        assert_eq!(fold(&with_dupes), reference);
    }
}

/// Push-pull anti-entropy: every replica contacts one random other replica per
/// round; the target merges and answers with its state when they differ.
fn gossip_round(nodes: &mut [Replica], rng: &mut ChaCha8Rng) {
    let n = nodes.len();
    for i in 0..n {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let sent = nodes[i].state().clone();
        nodes[j].merge(&sent);
        if *nodes[j].state() != sent {
            let reply = nodes[j].state().clone();
            nodes[i].merge(&reply);
        }
    }
}

#[test]
fn late_joiner_converges_within_ten_rounds() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members: Vec<PeerId> = (1..=7).map(peer).collect();
        let mut nodes: Vec<Replica> = members[..6]
            .iter()
            .map(|m| Replica::new(*m, members.iter().copied()))
            .collect();
        for (i, r) in nodes.iter_mut().enumerate() {
            r.pin(cid(i as u8), Factor::All);
            r.set_tag("app", &format!("v{}", i % 2), cid(i as u8));
        }
        let mut full = PinsetState::default();
        for r in &nodes {
            full.merge(r.state());
        }
        for _ in 0..3 {
            gossip_round(&mut nodes, &mut rng);
        }
        nodes.push(Replica::new(members[6], members.iter().copied()));
        let mut rounds = 0;
        while nodes.iter().any(|r| *r.state() != full) {
            rounds += 1;
            assert!(rounds <= 10, "seed {seed} needed more than 10 rounds");
            gossip_round(&mut nodes, &mut rng);
        }
    }
}

fn rank_oracle(digest: &ContentId, members: &[PeerId]) -> Vec<PeerId> {
    let mut v: Vec<([u8; 32], PeerId)> = members
        .iter()
        .map(|p| {
            let mut h = Sha256::new();
            h.update(digest.as_bytes());
            h.update(p.as_bytes());
            (h.finalize().into(), *p)
        })
        .collect();
    v.sort_by(|a, b| b.0.cmp(&a.0));
    v.into_iter().map(|(_, p)| p).collect()
}

#[test]
fn placement_matches_an_independent_ranking() {
    let members: Vec<PeerId> = (1..=6).map(peer).collect();
    for d in 0..50u8 {
        let digest = cid(d);
        let ranked = rank_oracle(&digest, &members);
        assert_eq!(place_replicas(&digest, Factor::All, &members), ranked);
        assert_eq!(place_replicas(&digest, Factor::N(3), &members), ranked[..3]);
        let mut shuffled = members.clone();
        shuffled.reverse();
        assert_eq!(place_replicas(&digest, Factor::N(1), &shuffled), ranked[..1]);
    }
}

#[test]
fn losing_a_holder_promotes_the_next_ranked_node() {
    let members: Vec<PeerId> = (1..=6).map(peer).collect();
    for d in 0..50u8 {
        let digest = cid(d);
        let before = place_replicas(&digest, Factor::N(3), &members);
        let gone = before[1];
        let rest: Vec<PeerId> = members.iter().copied().filter(|p| *p != gone).collect();
        let after = place_replicas(&digest, Factor::N(3), &rest);
        let ranked = rank_oracle(&digest, &members);
        assert_eq!(after[..2], [before[0], before[2]]);
        assert_eq!(after[2], ranked[3]);
    }
}

#[test]
fn factor_three_assigns_exactly_three_nodes() {
    let members: Vec<PeerId> = (1..=6).map(peer).collect();
    let mut replicas: Vec<Replica> = members
        .iter()
        .map(|m| Replica::new(*m, members.iter().copied()))
        .collect();
    replicas[0].pin(cid(9), Factor::N(3));
    let s = replicas[0].state().clone();
    for r in &mut replicas[1..] {
        r.merge(&s);
    }
    assert_eq!(replicas.iter().filter(|r| r.is_assigned(&cid(9))).count(), 3);
    let lone = Replica::new(peer(1), []);
    assert_eq!(place_replicas(&cid(9), Factor::N(3), &lone.members()), vec![peer(1)]);
}
