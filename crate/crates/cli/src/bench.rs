use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ravnest::multiring::{
    allreduce_cost, build_ring_schedule_from_ranges, dense_endpoints, run_allreduce_on, ClusterLayout, UniformLinks,
};
use ravnest::oracle;
use ravnest::simnet::{Simulator, Topology};

use crate::InvariantViolation;

#[derive(Args)]
pub struct BenchArgs {
    /// Cluster counts to measure.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2, 3, 4, 6])]
    clusters: Vec<usize>,
    /// Peers per cluster, i.e. parameter segments per cluster.
    #[arg(long, default_value_t = 4)]
    peers: usize,
    /// Parameter counts per model replica.
    #[arg(long, alias = "params", value_delimiter = ',', default_values_t = vec![100_000])]
    sizes: Vec<usize>,
    /// Cut each cluster at random points instead of equal segments.
    #[arg(long)]
    heterogeneous: bool,
    #[arg(long, default_value_t = 1e9)]
    bandwidth: f64,
    #[arg(long, default_value_t = 1e-4)]
    latency: f64,
    #[arg(long, default_value_t = 0, env = "RAVNEST_SEED")]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn layout(rng: &mut ChaCha8Rng, len: usize, peers: usize, random: bool) -> ClusterLayout {
    let peers = peers.clamp(1, len);
    let bounds: Vec<usize> = if random {
        let mut cuts = BTreeSet::new();
        while cuts.len() < peers - 1 {
            cuts.insert(rng.random_range(1..len));
        }
        std::iter::once(0).chain(cuts).chain(std::iter::once(len)).collect()
    } else {
        (0..=peers).map(|i| i * len / peers).collect()
    };
    bounds.windows(2).map(|w| w[0]..w[1]).collect()
}

struct Timing {
    seconds: f64,
    max_rel_err: f64,
}

fn simulate(layouts: &[ClusterLayout], vectors: &[Vec<f64>], bandwidth: f64, latency: f64) -> Result<Timing> {
    let schedule = build_ring_schedule_from_ranges(layouts)?;
    let counts: Vec<usize> = layouts.iter().map(Vec::len).collect();
    let endpoints = dense_endpoints(&counts);
    let nodes = counts.iter().sum::<usize>() as u32;
    let mut sim: Simulator<()> = Simulator::new(Topology::uniform(nodes, 1e12, bandwidth, latency))?.without_trace();
    let views: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
    let budget = 64 * (schedule.rings.len() as u64 + 1) * (layouts.len() as u64).pow(2);
    let run = run_allreduce_on(&mut sim, &schedule, &endpoints, &views, budget)?;
    let expected = oracle::mean_reference(vectors);
    let max_rel_err = run
        .params
        .iter()
        .map(|p| oracle::OracleReport::compare("mean", p, &expected, 1e-12).max_rel_err)
        .fold(0.0, f64::max);
    Ok(Timing { seconds: run.finished - run.started, max_rel_err })
}

pub fn run(args: BenchArgs) -> Result<()> {
    if args.sizes.is_empty() || args.clusters.is_empty() {
        bail!(ravnest::Error::Config("need at least one size and one cluster count".into()));
    }
    if args.sizes.contains(&0) || args.peers == 0 || args.clusters.iter().any(|&c| c < 2) {
        bail!(ravnest::Error::Config("need sizes >= 1, peers >= 1 and every cluster count >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut rows = vec![
        "clusters,peers,rings,rounds,params,multi_ring_seconds,single_ring_seconds,speedup,predicted_multi_ring,predicted_single_ring,predicted_ratio,max_rel_err"
            .to_string(),
    ];
    println!(
        "{:>8} {:>10} {:>6} {:>6} {:>12} {:>12} {:>8} {:>10} {:>12}",
        "clusters", "params", "rings", "rounds", "multi (s)", "single (s)", "speedup", "pred ratio", "max rel err"
    );
    let mut worst: f64 = 0.0;
    for &size in &args.sizes {
        for &c in &args.clusters {
            let layouts: Vec<ClusterLayout> = (0..c).map(|_| layout(&mut rng, size, args.peers, args.heterogeneous)).collect();
            let vectors: Vec<Vec<f64>> = (0..c).map(|_| (0..size).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let multi = simulate(&layouts, &vectors, args.bandwidth, args.latency)?;
            let single = simulate(&vec![vec![0..size]; c], &vectors, args.bandwidth, args.latency)?;
            let schedule = build_ring_schedule_from_ranges(&layouts)?;
            let cost = allreduce_cost(&schedule, &UniformLinks { latency: args.latency, bandwidth: args.bandwidth });
            let rounds = 2 * (c - 1);
            let ratio = cost.critical_path / cost.single_ring.seconds;
            let err = multi.max_rel_err.max(single.max_rel_err);
            worst = worst.max(err);
            println!(
                "{c:>8} {size:>10} {:>6} {rounds:>6} {:>12.6} {:>12.6} {:>8.3} {ratio:>10.4} {err:>12.2e}",
                schedule.rings.len(),
                multi.seconds,
                single.seconds,
                single.seconds / multi.seconds,
            );
            rows.push(format!(
                "{c},{},{},{rounds},{size},{},{},{},{},{},{ratio},{err}",
                args.peers,
                schedule.rings.len(),
                multi.seconds,
                single.seconds,
                single.seconds / multi.seconds,
                cost.critical_path,
                cost.single_ring.seconds,
            ));
        }
    }
    if let Some(out) = &args.out {
        std::fs::write(out, rows.join("\n") + "\n").with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
    }
    if worst > 1e-12 {
        bail!(InvariantViolation(format!("all-reduce result differs from the exact mean by {worst:.2e}")));
    }
    Ok(())
}
