use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use ravnest::multiring::{
    build_ring_schedule_from_ranges, dense_endpoints, run_allreduce, run_allreduce_on, ClusterLayout, Frame,
};
use ravnest::oracle;
use ravnest::simnet::{MessageKind, NodeId, Simulator, Topology};
use ravnest::ParameterVector;

fn layout_from_cuts(dims: usize, cuts: &BTreeSet<usize>) -> ClusterLayout {
    let mut bounds = vec![0];
    bounds.extend(cuts.iter().copied().filter(|&c| c > 0 && c < dims));
    bounds.push(dims);
    bounds.windows(2).map(|w| w[0]..w[1]).collect()
}

fn layouts() -> impl Strategy<Value = (usize, Vec<ClusterLayout>)> {
    (1usize..300, 2usize..6).prop_flat_map(|(dims, c)| {
        let cuts = prop::collection::btree_set(1..dims.max(2), 0..4);
        (Just(dims), prop::collection::vec(cuts, c))
            .prop_map(|(dims, cs)| (dims, cs.iter().map(|c| layout_from_cuts(dims, c)).collect()))
    })
}

/// Each cluster keeps a subset of one shared cut set, so layouts are nested.
fn nested_layouts() -> impl Strategy<Value = Vec<ClusterLayout>> {
    (8usize..300, 2usize..6).prop_flat_map(|(dims, c)| {
        prop::collection::btree_set(1..dims, 1..5).prop_flat_map(move |master| {
            let m: Vec<usize> = master.into_iter().collect();
            let k = m.len();
            prop::collection::vec(prop::collection::vec(any::<bool>(), k), c).prop_map(move |keep| {
                let mut out: Vec<ClusterLayout> = keep
                    .iter()
                    .map(|mask| {
                        let cuts: BTreeSet<usize> = m.iter().zip(mask).filter(|(_, k)| **k).map(|(c, _)| *c).collect();
                        layout_from_cuts(dims, &cuts)
                    })
                    .collect();
                out[0] = layout_from_cuts(dims, &m.iter().copied().collect());
                out
            })
        })
    })
}

fn vectors(c: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut state = seed | 1;
    (0..c)
        .map(|_| {
            (0..dims)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    (state % 20_000) as f64 / 1000.0 - 10.0
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_mean_on_every_cluster((dims, layouts) in layouts(), seed in any::<u64>()) {
        let schedule = build_ring_schedule_from_ranges(&layouts).unwrap();
        let vs = vectors(layouts.len(), dims, seed);
        let inputs: Vec<ParameterVector> = vs.iter().cloned().map(ParameterVector::flat).collect();
        let out = run_allreduce(&schedule, &inputs).unwrap();
        let expected = oracle::mean_reference(&vs);
        for o in &out {
            let rep = oracle::OracleReport::compare("mean", o.values(), &expected, 1e-12);
            prop_assert!(rep.pass, "{:?}", rep);
        }
    }

    #[test]
    fn second_pass_changes_nothing((dims, layouts) in layouts(), seed in any::<u64>()) {
        let schedule = build_ring_schedule_from_ranges(&layouts).unwrap();
        let inputs: Vec<ParameterVector> = vectors(layouts.len(), dims, seed).into_iter().map(ParameterVector::flat).collect();
        let once = run_allreduce(&schedule, &inputs).unwrap();
        let twice = run_allreduce(&schedule, &once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            let rep = oracle::OracleReport::compare("idempotent", b.values(), a.values(), 1e-12);
            prop_assert!(rep.pass, "{:?}", rep);
        }
    }

    #[test]
    fn rings_tile_the_parameter_space((dims, layouts) in layouts()) {
        let schedule = build_ring_schedule_from_ranges(&layouts).unwrap();
        schedule.validate(&layouts).unwrap();
        let mut covered = vec![0u32; dims];
        for ring in &schedule.rings {
            for i in ring.range() {
                covered[i] += 1;
            }
            prop_assert_eq!(ring.members.len(), layouts.len());
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
        let boundaries: BTreeSet<usize> = layouts.iter().flatten().map(|r| r.start).collect();
        prop_assert_eq!(schedule.rings.len(), boundaries.len());
    }

    #[test]
    fn nested_layouts_need_max_peers_rings(layouts in nested_layouts()) {
        let schedule = build_ring_schedule_from_ranges(&layouts).unwrap();
        let max_peers = layouts.iter().map(Vec::len).max().unwrap();
        prop_assert_eq!(schedule.rings.len(), max_peers);
    }

    #[test]
    fn every_ring_runs_two_c_minus_one_rounds((dims, layouts) in layouts(), seed in any::<u64>()) {
        let schedule = build_ring_schedule_from_ranges(&layouts).unwrap();
        let vs = vectors(layouts.len(), dims, seed);
        let counts: Vec<usize> = layouts.iter().map(Vec::len).collect();
        let endpoints = dense_endpoints(&counts);
        let mut sim: Simulator<()> =
            Simulator::new(Topology::uniform(counts.iter().sum::<usize>() as u32, 1e9, 1e8, 1e-4)).unwrap();
        let views: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        run_allreduce_on(&mut sim, &schedule, &endpoints, &views, 1 << 20).unwrap();
        let mut rounds: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
        for r in sim.trace().iter().filter(|r| r.kind == MessageKind::RingChunk) {
            rounds.entry(r.ring_id).or_default().insert(r.step_tag);
        }
        prop_assert_eq!(rounds.len(), schedule.rings.len());
        for tags in rounds.values() {
            prop_assert_eq!(tags.len(), 2 * (layouts.len() - 1));
        }
    }

    #[test]
    fn frames_roundtrip(ring in any::<u32>(), round in any::<u32>(), offset in any::<u64>(),
                        payload in prop::collection::vec(any::<f64>(), 0..64)) {
        let frame = Frame { kind: MessageKind::RingChunk, ring_id: ring, round, offset, payload };
        let bytes = frame.encode();
        let (back, used) = Frame::decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.kind, frame.kind);
        prop_assert_eq!((back.ring_id, back.round, back.offset), (frame.ring_id, frame.round, frame.offset));
        let same = back.payload.iter().zip(&frame.payload).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same && back.payload.len() == frame.payload.len());
    }
}

#[test]
fn three_two_one_peers_give_three_rings() {
    let layouts: Vec<ClusterLayout> = vec![vec![0..4, 4..8, 8..12], vec![0..4, 4..12], vec![0..12]];
    let schedule = build_ring_schedule_from_ranges(&layouts).unwrap();
    assert_eq!(schedule.rings.len(), 3);
    assert!(schedule.rings.iter().all(|r| r.members.len() == 3));
    assert_eq!(schedule.rings[0].members[1].peer, 0);
    assert_eq!(schedule.rings[1].members[1].peer, 1);
    assert_eq!(schedule.rings[2].members[1].peer, 1);
}

#[test]
fn truncated_frame_is_rejected() {
    let frame = Frame { kind: MessageKind::RingChunk, ring_id: 1, round: 2, offset: 3, payload: vec![1.0, 2.0] };
    let bytes = frame.encode();
    assert!(Frame::decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(Frame::decode(&bytes[..3]).is_err());
}

#[test]
fn endpoints_are_dense() {
    assert_eq!(dense_endpoints(&[2, 1]), vec![vec![NodeId(0), NodeId(1)], vec![NodeId(2)]]);
}
