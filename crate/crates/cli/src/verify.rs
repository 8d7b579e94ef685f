use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ravnest::clusterform::{evolve, GaParams, ModelFootprint, NodePool, PoolNode, SessionPlan};
use ravnest::data::{Batch, DatasetSpec};
use ravnest::model::{build_model, partition_model, Activation, Loss, Matrix, Model, ModelSpec};
use ravnest::multiring::{build_ring_schedule_from_ranges, run_allreduce, ClusterLayout};
use ravnest::orchestrator::{plan_topology, preview_batches, train, Kappa, TrainConfig};
use ravnest::oracle::{self, OracleReport};
use ravnest::pipeline::{measure_bubble, run_pipeline, uniform_pipeline_topology, PipelineConfig};
use ravnest::simnet::NodeId;
use ravnest::ParameterVector;

use crate::InvariantViolation;

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0, env = "RAVNEST_SEED")]
    seed: u64,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn random_batches(rng: &mut ChaCha8Rng, n: usize, rows: usize, inputs: usize, outputs: usize) -> Vec<Batch> {
    (0..n as u64)
        .map(|batch_id| Batch {
            inputs: Matrix::from_vec(rows, inputs, (0..rows * inputs).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            targets: Matrix::from_vec(rows, outputs, (0..rows * outputs).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap(),
            batch_id,
            cluster_id: 0,
        })
        .collect()
}

fn gradients(rng: &mut ChaCha8Rng) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for (name, act) in [("identity", Activation::Identity), ("tanh", Activation::Tanh), ("relu", Activation::Relu)] {
        let spec = ModelSpec::new(vec![3, 5, 2], act, Loss::Mse);
        let model = Model::new(spec.clone())?;
        let mut worst = OracleReport::compare(&format!("fd-gradient-{name}"), &[], &[], 1e-4);
        for _ in 0..20 {
            let params: Vec<f64> = (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = &random_batches(rng, 1, 4, 3, 2)[0];
            let (_, g) = model.loss_and_gradient(&params, &b.inputs, &b.targets)?;
            let fd = oracle::fd_gradient(&spec, &params, &b.inputs, &b.targets, 1e-5);
            let scale = fd.iter().fold(1e-8f64, |m, x| m.max(x.abs()));
            let scaled_g: Vec<f64> = g.iter().map(|x| x / scale).collect();
            let scaled_fd: Vec<f64> = fd.iter().map(|x| x / scale).collect();
            let rep = OracleReport::compare(&worst.name, &scaled_g, &scaled_fd, 1e-4);
            if rep.max_rel_err >= worst.max_rel_err {
                worst = rep;
            }
        }
        out.push(worst);
    }
    Ok(out)
}

fn pipeline_sgd(rng: &mut ChaCha8Rng) -> Result<OracleReport> {
    let spec = ModelSpec::new(vec![4, 6, 5, 2], Activation::Tanh, Loss::Mse);
    let (model, init) = build_model(&spec, 1)?;
    let subs = partition_model(&model, &[1e12; 3], 4)?;
    let batches = random_batches(rng, 30, 4, 4, 2);
    let mut cfg = PipelineConfig::new(0.05, 3);
    cfg.max_inflight = 1;
    let (topo, nodes) = uniform_pipeline_topology(3, 1e9, 1e-5);
    let run = run_pipeline(Arc::new(model), &subs, &nodes, topo, init.values().to_vec(), Box::new(VecDeque::from(batches.clone())), cfg, 30)?;
    let traj = oracle::sgd_reference(&spec, init.values(), &batches, 0.05, 1);
    let bitwise = run.params == traj[30];
    Ok(OracleReport::boolean("pipeline-one-in-flight-vs-sgd", bitwise, "3 peers, 30 batches, bitwise"))
}

fn single_node_training() -> Result<OracleReport> {
    let data = Arc::new(DatasetSpec::Linear { samples: 128, features: 4, outputs: 1, noise: 0.1, seed: 3 }.generate()?);
    let spec = ModelSpec::new(vec![4, 6, 1], Activation::Tanh, Loss::Mse);
    let plan = SessionPlan::uniform(&spec, 8, &[1])?;
    let cfg = TrainConfig::new(0.05, Kappa::NEVER, 200, 8);
    let report = train(&cfg, &plan, plan_topology(&plan, 1e9, 1e-4), data.clone())?;
    let (_, init) = build_model(&spec, 0)?;
    let batches = preview_batches(&data, 1, 8, 0, 200)?;
    let traj = oracle::sgd_reference(&spec, init.values(), &batches[0], 0.05, 1);
    Ok(OracleReport::boolean("train-c1-p1-vs-sgd", report.cluster_params[0] == traj[200], "200 steps, bitwise"))
}

fn allreduce(rng: &mut ChaCha8Rng) -> Result<OracleReport> {
    let mut worst = OracleReport::compare("allreduce-exact-mean", &[], &[], 1e-12);
    for _ in 0..50 {
        let c = rng.random_range(2..=6usize);
        let dims = rng.random_range(8..=512usize);
        let layouts: Vec<ClusterLayout> = (0..c)
            .map(|_| {
                let mut cuts: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(1..dims)).collect();
                cuts.sort_unstable();
                cuts.dedup();
                std::iter::once(0).chain(cuts).chain(std::iter::once(dims)).collect::<Vec<_>>().windows(2).map(|w| w[0]..w[1]).collect()
            })
            .collect();
        let schedule = build_ring_schedule_from_ranges(&layouts)?;
        let vectors: Vec<Vec<f64>> = (0..c).map(|_| (0..dims).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let inputs: Vec<ParameterVector> = vectors.iter().cloned().map(ParameterVector::flat).collect();
        let expected = oracle::mean_reference(&vectors);
        for out in run_allreduce(&schedule, &inputs)? {
            let rep = OracleReport::compare(&worst.name, out.values(), &expected, 1e-12);
            if rep.max_rel_err >= worst.max_rel_err {
                worst = rep;
            }
        }
    }
    Ok(worst)
}

fn ga(rng: &mut ChaCha8Rng, seed: u64) -> Result<OracleReport> {
    let fp = ModelFootprint { batch_size: 1, fwdbwd_bytes_per_sample: 4e8, param_bytes: 6e8 };
    let mut worst: f64 = 1.0;
    for case in 0..10u64 {
        let n = rng.random_range(4..=9usize);
        let q = rng.random_range(1..=3usize);
        let nodes = (0..n as u32)
            .map(|i| PoolNode { id: NodeId(i), ram: rng.random_range(0.2e9..1.5e9), bandwidth: rng.random_range(1e7..1e9) })
            .collect();
        let pool = NodePool::new(nodes)?;
        let evo = evolve(&pool, &fp, q, &GaParams { seed: seed.wrapping_add(case), ..GaParams::default() })?;
        let exact = oracle::exhaustive_partition(&pool, &fp, q);
        if exact.fitness.total > 0.0 {
            worst = worst.max(evo.fitness.total / exact.fitness.total);
        }
    }
    let mut rep = OracleReport::boolean("ga-vs-exhaustive", worst <= 1.05, format!("worst ratio {worst:.4} over 10 pools"));
    rep.max_rel_err = worst - 1.0;
    rep.tolerance = 0.05;
    Ok(rep)
}

fn bubble() -> Result<OracleReport> {
    let spec = ModelSpec::new(vec![8, 8, 8, 8], Activation::Tanh, Loss::Mse);
    let (model, init) = build_model(&spec, 1)?;
    let subs = partition_model(&model, &[1e12; 3], 4)?;
    let mut cfg = PipelineConfig::new(0.01, 3);
    cfg.max_inflight = 1;
    cfg.cost.seconds_per_param_sample = 1e-6;
    let fwd: Vec<f64> = subs.iter().map(|s| cfg.cost.forward_seconds(s.param_count(), 4, 1.0)).collect();
    let bwd: Vec<f64> = fwd.iter().map(|f| f * cfg.cost.backward_ratio).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batches = random_batches(&mut rng, 60, 4, 8, 8);
    let (topo, nodes) = uniform_pipeline_topology(3, 1e9, 1e-7);
    let run = run_pipeline(Arc::new(model), &subs, &nodes, topo, init.into_values(), Box::new(VecDeque::from(batches)), cfg, 60)?;
    let measured = measure_bubble(&run.trace, 5, 50)?;
    let closed = oracle::sync_pipeline_schedule(&fwd, &bwd);
    let mut rep = OracleReport::compare("sync-bubble-vs-closed-form", &[measured], &[closed], 0.05);
    rep.details.push(format!("measured {measured:.4}, closed form {closed:.4}"));
    Ok(rep)
}

pub fn run(args: VerifyArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut reports = gradients(&mut rng)?;
    reports.push(pipeline_sgd(&mut rng)?);
    reports.push(single_node_training()?);
    reports.push(allreduce(&mut rng)?);
    reports.push(ga(&mut rng, args.seed)?);
    reports.push(bubble()?);
    let mut csv = vec!["name,pass,max_abs_err,max_rel_err,tolerance,details".to_string()];
    for r in &reports {
        println!(
            "{} {}: max abs {:.3e}, max rel {:.3e}, tolerance {:.1e}{}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.max_abs_err,
            r.max_rel_err,
            r.tolerance,
            if r.details.is_empty() { String::new() } else { format!(" ({})", r.details.join("; ")) }
        );
        csv.push(format!(
            "{},{},{},{},{},\"{}\"",
            r.name,
            r.pass,
            r.max_abs_err,
            r.max_rel_err,
            r.tolerance,
            r.details.join("; ").replace('"', "'")
        ));
    }
    if let Some(out) = &args.out {
        std::fs::write(out, csv.join("\n") + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        bail!(InvariantViolation(format!("oracle checks failed: {}", failed.join(", "))));
    }
    Ok(())
}
