use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use proptest::prelude::*;

use ravnest::data::Batch;
use ravnest::model::{build_model, partition_model, Activation, Loss, Matrix, ModelSpec};
use ravnest::oracle;
use ravnest::pipeline::realtime::run_realtime;
use ravnest::pipeline::{run_pipeline, uniform_pipeline_topology, Outcome, PipelineConfig, PipelineRun};
use ravnest::simnet::Topology;

const ARCH: [usize; 5] = [3, 6, 5, 4, 2];

fn batches(n: usize, rows: usize, salt: u64) -> Vec<Batch> {
    (0..n)
        .map(|b| {
            let s = b as f64 + salt as f64 * 0.01;
            let x = (0..rows * ARCH[0]).map(|i| ((s * 131.0 + i as f64) * 0.37).sin()).collect();
            let y = (0..rows * ARCH[4]).map(|i| ((s * 17.0 + i as f64) * 0.11).cos()).collect();
            Batch {
                inputs: Matrix::from_vec(rows, ARCH[0], x).unwrap(),
                targets: Matrix::from_vec(rows, ARCH[4], y).unwrap(),
                batch_id: b as u64,
                cluster_id: 0,
            }
        })
        .collect()
}

fn spec() -> ModelSpec {
    ModelSpec::new(ARCH.to_vec(), Activation::Tanh, Loss::Mse)
}

fn run(peers: usize, speeds: &[f64], cfg: PipelineConfig, n: usize, salt: u64) -> (PipelineRun, Vec<f64>, Vec<Batch>) {
    let (model, init) = build_model(&spec(), 3).unwrap();
    let subs = partition_model(&model, &vec![1e12; peers], 4).unwrap();
    let (mut topo, nodes): (Topology, _) = uniform_pipeline_topology(peers, 1e8, 1e-5);
    for (node, s) in topo.nodes.iter_mut().zip(speeds) {
        node.speed_factor = *s;
    }
    let bs = batches(n, 4, salt);
    let out = run_pipeline(
        Arc::new(model),
        &subs,
        &nodes,
        topo,
        init.values().to_vec(),
        Box::new(VecDeque::from(bs.clone())),
        cfg,
        n as u64,
    )
    .unwrap();
    (out, init.into_values(), bs)
}

fn setup() -> impl Strategy<Value = (usize, Vec<f64>, usize, usize, u64)> {
    (1usize..=4).prop_flat_map(|p| {
        (Just(p), prop::collection::vec(0.25f64..4.0, p), 1usize..=p + 2, 6usize..30, any::<u64>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn tau_nonincreasing_along_pipeline((p, speeds, inflight, n, salt) in setup()) {
        let mut cfg = PipelineConfig::new(0.01, p);
        cfg.max_inflight = inflight;
        let (out, ..) = run(p, &speeds, cfg, n, salt);
        let mut by_batch: BTreeMap<u64, Vec<Option<u64>>> = BTreeMap::new();
        for r in &out.records {
            by_batch.entry(r.batch_id).or_insert_with(|| vec![None; p])[r.peer] = Some(r.tau);
        }
        prop_assert_eq!(by_batch.len(), n);
        for taus in by_batch.values() {
            let taus: Vec<u64> = taus.iter().map(|t| t.expect("every peer runs every batch")).collect();
            prop_assert!(taus.windows(2).all(|w| w[0] >= w[1]), "{:?}", taus);
            prop_assert_eq!(taus[p - 1], 0);
        }
    }

    #[test]
    fn enforced_bound_holds((p, speeds, inflight, n, salt) in setup(), bound in 0u64..4) {
        let mut cfg = PipelineConfig::new(0.01, p);
        cfg.max_inflight = inflight;
        cfg.enforce_t = true;
        cfg.t_bound = bound;
        let (out, ..) = run(p, &speeds, cfg, n, salt);
        prop_assert!(out.records.iter().all(|r| r.tau <= bound));
        prop_assert_eq!(out.batches_done, n as u64);
    }

    #[test]
    fn one_in_flight_is_sgd((p, speeds, _inflight, n, salt) in setup()) {
        let mut cfg = PipelineConfig::new(0.05, p);
        cfg.max_inflight = 1;
        let (out, init, bs) = run(p, &speeds, cfg, n, salt);
        let traj = oracle::sgd_reference(&spec(), &init, &bs, 0.05, 1);
        prop_assert_eq!(&out.params, &traj[n]);
    }

    #[test]
    fn updates_count_backward_passes((p, speeds, inflight, n, salt) in setup(), accum in 1usize..4) {
        let mut cfg = PipelineConfig::new(0.01, p);
        cfg.max_inflight = inflight;
        cfg.n_accum = accum;
        let (out, ..) = run(p, &speeds, cfg, n, salt);
        for peer in 0..p {
            let passes = out.records.iter().filter(|r| r.peer == peer).count();
            let updates = out.updates.iter().filter(|u| matches!(u, Outcome::Update { peer: q, .. } if *q == peer)).count();
            prop_assert_eq!(passes, n);
            prop_assert_eq!(updates, passes / accum);
        }
    }

    #[test]
    fn runs_are_deterministic((p, speeds, inflight, n, salt) in setup()) {
        let mut cfg = PipelineConfig::new(0.01, p);
        cfg.max_inflight = inflight;
        let (a, ..) = run(p, &speeds, cfg, n, salt);
        let (b, ..) = run(p, &speeds, cfg, n, salt);
        prop_assert_eq!(a.trace_hash, b.trace_hash);
        prop_assert_eq!(a.params, b.params);
    }
}

#[test]
fn accumulated_updates_match_oracle() {
    let mut cfg = PipelineConfig::new(0.05, 3);
    cfg.max_inflight = 1;
    cfg.n_accum = 3;
    let (out, init, bs) = run(3, &[1.0, 2.0, 0.5], cfg, 12, 7);
    let traj = oracle::sgd_reference(&spec(), &init, &bs, 0.05, 3);
    assert_eq!(&out.params, traj.last().unwrap());
}

#[test]
fn realtime_keeps_metric_invariants() {
    let (model, init) = build_model(&spec(), 3).unwrap();
    let subs = partition_model(&model, &[1e12; 4], 4).unwrap();
    let mut cfg = PipelineConfig::new(0.01, 4);
    cfg.enforce_t = true;
    cfg.t_bound = 2;
    let out = run_realtime(Arc::new(model), &subs, init.into_values(), batches(60, 4, 0), cfg).unwrap();
    assert_eq!(out.updates, 240);
    assert!(out.records.iter().all(|r| r.tau <= 2));
    assert!(out.records.iter().filter(|r| r.peer == 3).all(|r| r.tau == 0));
    let mut by_batch: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for r in &out.records {
        by_batch.entry(r.batch_id).or_insert_with(|| vec![0; 4])[r.peer] = r.tau;
    }
    assert!(by_batch.values().all(|t| t.windows(2).all(|w| w[0] >= w[1])));
}
