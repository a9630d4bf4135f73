use edgepier_core::time::{millis, Micros, SECOND};
use edgepier_netsim::fabric::{Event, Fabric, PairCounters, BURST_BYTES};
use edgepier_netsim::topology::{LinkShape, Topology};
use proptest::prelude::*;

type F = Fabric<u64, u32>;

fn pair(mbps: f64, latency_ms: f64) -> F {
    Fabric::new(&Topology::new(vec!["a".into(), "b".into()], LinkShape::mbps(mbps, latency_ms)))
}

fn drain(f: &mut F) -> Vec<(u64, Event<u64, u32>)> {
    let mut out = Vec::new();
    while let Some(e) = f.step() {
        out.push(e);
    }
    out
}

/// Time to push one burst through a link of `bps`.
fn quantum(bps: u64) -> Micros {
    BURST_BYTES * 8 * SECOND / bps
}

#[test]
fn one_mib_over_eight_megabit_takes_about_a_second() {
    let mut f = pair(8.0, 0.0);
    assert!(f.send(0, 1, 1 << 20, 0));
    let evs = drain(&mut f);
    assert_eq!(evs.len(), 1);
    let (at, _) = &evs[0];
    let q = quantum(8_000_000);
    assert!(at.abs_diff(SECOND) <= q, "delivered at {at} us, quantum {q} us");
}

#[test]
fn zero_byte_send_is_immediate() {
    let mut f = pair(8.0, 0.0);
    f.send(0, 1, 0, 7);
    match f.step() {
        Some((0, Event::Deliver { payload: 7, bytes: 0, .. })) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn certain_drop_refuses_the_connection() {
    let topo = Topology::new(vec!["a".into(), "b".into()], LinkShape::mbps(100.0, 1.0).with_drop(1.0));
    let mut f: F = Fabric::new(&topo);
    assert!(!f.send(0, 1, 100, 3));
    match f.step() {
        Some((at, Event::SendFailed { from: 0, to: 1, payload: 3 })) => assert_eq!(at, millis(2)),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(f.counters(0, 1), PairCounters::default());
}

#[test]
fn advance_stops_at_the_boundary() {
    let mut f = pair(100.0, 1.0);
    assert!(f.advance(0).is_empty());
    f.schedule(10 * SECOND, 0, 1);
    assert!(f.advance(9_999_000).is_empty());
    assert_eq!(f.now(), 9_999_000);
    let fired = f.advance(millis(1));
    assert_eq!(fired.len(), 1);
    assert!(matches!(fired[0].1, Event::Timer { node: 0, timer: 1 }));
}

#[test]
fn partition_drops_and_heal_restores() {
    let mut f = pair(100.0, 1.0);
    f.partition(&[0], &[1]);
    assert!(!f.send(0, 1, 10, 0));
    assert!(matches!(f.step(), Some((_, Event::SendFailed { .. }))));
    f.heal();
    assert!(f.send(0, 1, 10, 1));
    assert!(matches!(f.step(), Some((_, Event::Deliver { payload: 1, .. }))));
}

#[test]
fn partition_loses_in_flight_messages() {
    let mut f = pair(1.0, 5.0);
    f.send(0, 1, 100_000, 0);
    f.advance(millis(10));
    f.partition(&[0], &[1]);
    assert!(drain(&mut f).is_empty());
    let c = f.counters(0, 1);
    assert_eq!(c.messages_dropped, 1);
    assert_eq!(c.bytes_delivered, 0);
}

#[test]
fn uplink_links_are_named() {
    let topo = Topology::edge_site(
        "o",
        &["s1".into(), "s2".into()],
        LinkShape::mbps(1000.0, 1.0),
        LinkShape::mbps(20.0, 20.0),
        1,
    );
    let f: F = Fabric::new(&topo);
    let down = f.link_by_name("uplink-down").unwrap();
    assert_eq!(f.link_of(0, 1), down);
    assert_eq!(f.link_of(0, 2), down);
    assert_eq!(f.link_shape(down).bandwidth_bps, 20_000_000);
    assert_eq!(f.link_of(1, 0), f.link_by_name("uplink-up").unwrap());
    assert_eq!(f.link_of(1, 2), f.link_by_name("s1-nic").unwrap());
}

#[derive(Debug, Clone)]
struct Send {
    from: usize,
    to: usize,
    bytes: u64,
    gap: Micros,
}

fn sends(nodes: usize) -> impl Strategy<Value = Vec<Send>> {
    prop::collection::vec(
        (0..nodes, 0..nodes, 0u64..300_000, 0u64..200_000).prop_map(|(from, to, bytes, gap)| Send {
            from,
            to,
            bytes,
            gap,
        }),
        1..60,
    )
}

fn mesh(drop: f64, seed: u64) -> F {
    let mut t = Topology::new(
        (0..4).map(|i| format!("n{i}")).collect(),
        LinkShape::mbps(10.0, 3.0).with_drop(drop),
    )
    .with_override("n0", "n1", LinkShape::mbps(2.0, 30.0).with_drop(drop));
    t.seed = seed;
    Fabric::new(&t)
}

/// Replays `plan`; returns (send time, delivery time, from, to) per delivery.
fn replay(f: &mut F, plan: &[Send]) -> Vec<(u64, u64, usize, usize)> {
    let mut out = Vec::new();
    for s in plan {
        for (at, e) in f.advance(s.gap) {
            if let Event::Deliver { from, to, payload, .. } = e {
                out.push((payload, at, from, to));
            }
        }
        let now = f.now();
        f.send(s.from, s.to, s.bytes, now);
    }
    for (at, e) in drain(f) {
        if let Event::Deliver { from, to, payload, .. } = e {
            out.push((payload, at, from, to));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bytes_are_conserved(plan in sends(4), drop in 0.0f64..0.5, seed in any::<u64>()) {
        let mut f = mesh(drop, seed);
        replay(&mut f, &plan);
        for a in 0..4 {
            for b in 0..4 {
                let c = f.counters(a, b);
                prop_assert_eq!(c.bytes_delivered, c.bytes_sent - c.bytes_dropped);
                prop_assert_eq!(c.messages_delivered, c.messages_sent - c.messages_dropped);
            }
        }
    }

    #[test]
    fn nothing_arrives_before_its_latency(plan in sends(4), seed in any::<u64>()) {
        let mut f = mesh(0.0, seed);
        let t = f.link_shape(f.link_of(0, 1)).latency;
        let d = f.link_shape(f.link_of(2, 3)).latency;
        for (sent, at, from, to) in replay(&mut f, &plan) {
            let lat = match (from, to) {
                _ if from == to => 0,
                (0, 1) | (1, 0) => t,
                _ => d,
            };
            prop_assert!(at >= sent + lat, "{from}->{to} sent {sent} delivered {at}");
        }
    }

    #[test]
    fn utilization_stays_under_bandwidth(plan in sends(4), seed in any::<u64>()) {
        let mut f = mesh(0.0, seed);
        replay(&mut f, &plan);
        for name in ["n0->n1", "n1->n0", "n0-nic", "n2-nic", "n3-nic"] {
            let Some(l) = f.link_by_name(name) else { continue };
            let cap = f.link_shape(l).bandwidth_bps / 8 + BURST_BYTES;
            for (s, b) in f.utilization_bytes(l).iter().enumerate() {
                prop_assert!(*b <= cap, "{name} second {s}: {b} > {cap}");
            }
        }
    }

    #[test]
    fn same_seed_same_counters(plan in sends(4), seed in any::<u64>()) {
        let run = || {
            let mut f = mesh(0.3, seed);
            let d = replay(&mut f, &plan);
            let c: Vec<PairCounters> = (0..16).map(|i| f.counters(i / 4, i % 4)).collect();
            (d, c, f.events_processed())
        };
        prop_assert_eq!(run(), run());
    }
}
