use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use sha2::{Digest, Sha256};

use ravnest::clusterform::SessionPlan;
use ravnest::config::{pool_topology, ExperimentConfig};
use ravnest::orchestrator::{
    measure_convergence, metrics_hash, plan_topology, train, write_averagings_csv, write_metrics_csv, TrainReport,
};
use ravnest::pipeline::{measure_bubble, write_staleness_csv, PipelineTrace};
use ravnest::simnet::Topology;
use ravnest::NodePool;

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub clusters: usize,
    pub peers: Vec<usize>,
    pub seed: u64,
    pub k_target: u64,
    pub updates: u64,
    pub allreduce_count: usize,
    pub virtual_time: f64,
    pub updates_per_second: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_grad_norm2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_slope: Option<f64>,
    pub max_tau: u64,
    /// Per cluster; NaN when the run admitted too few batches to measure.
    pub bubble_fraction: Vec<f64>,
    pub metrics_hash: String,
    pub trace_hash: String,
}

impl Summary {
    fn from_report(cfg: &ExperimentConfig, plan: &SessionPlan, report: &TrainReport) -> Self {
        let checkpoint = report.rows.iter().rev().find(|r| r.grad_norm.is_some());
        Summary {
            clusters: plan.clusters.len(),
            peers: plan.peer_counts(),
            seed: cfg.train.seed,
            k_target: cfg.train.k_target,
            updates: report.clock.t,
            allreduce_count: report.averagings.len(),
            virtual_time: report.virtual_time,
            updates_per_second: report.updates_per_second(),
            final_loss: checkpoint.and_then(|r| r.loss),
            final_grad_norm2: checkpoint.and_then(|r| r.grad_norm),
            rate_slope: measure_convergence(&report.rows, 0.5).ok().map(|c| c.rate_slope),
            max_tau: report.max_tau(),
            bubble_fraction: report.traces.iter().map(bubble).collect(),
            metrics_hash: metrics_hash(&report.rows),
            trace_hash: report.trace_hash.clone(),
        }
    }
}

/// Bubble fraction after the first tenth of admissions.
fn bubble(trace: &PipelineTrace) -> f64 {
    let n = trace.admissions.len();
    let warmup = n / 10;
    match n.checked_sub(warmup + 1) {
        Some(window) if window > 0 => measure_bubble(trace, warmup, window).unwrap_or(f64::NAN),
        _ => f64::NAN,
    }
}

#[derive(Serialize)]
struct Manifest {
    ravnest_version: &'static str,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn topology_for(cfg: &ExperimentConfig, plan: &SessionPlan) -> Result<Topology> {
    Ok(match (&cfg.cluster.topology, &cfg.cluster.inventory) {
        (Some(path), _) => Topology::load(path)?,
        (None, Some(path)) => pool_topology(&NodePool::load(path)?, cfg.cluster.latency),
        (None, None) => plan_topology(plan, cfg.cluster.bandwidth, cfg.cluster.latency),
    })
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cfg.apply_env_seed()? {
        eprintln!("seed overridden to {seed} from {}", ravnest::config::SEED_ENV);
    }
    Ok(cfg)
}

fn plan_for(cfg: &ExperimentConfig, plan_path: Option<&Path>) -> Result<(SessionPlan, Topology)> {
    match plan_path {
        Some(path) => {
            let plan = SessionPlan::load(path)?;
            if plan.model != cfg.model || plan.batch_size != cfg.train.batch_size {
                bail!(ravnest::Error::Config(format!(
                    "plan {} was made for a different model or batch size",
                    path.display()
                )));
            }
            let topo = topology_for(cfg, &plan)?;
            Ok((plan, topo))
        }
        None => Ok(cfg.session()?),
    }
}

pub fn describe_plan(plan: &SessionPlan) -> String {
    let mut out = String::new();
    for c in &plan.clusters {
        let nodes: Vec<String> = c.nodes.iter().map(|n| n.to_string()).collect();
        let layers: Vec<String> = c.submodels.iter().map(|s| format!("{:?}", s.layers)).collect();
        out.push_str(&format!("cluster {}: nodes [{}] layers [{}]\n", c.cluster_id, nodes.join(", "), layers.join(", ")));
    }
    if let Some(f) = &plan.fitness {
        out.push_str(&format!("fitness: imbalance {:.6e} penalty {:.6e}\n", f.imbalance, f.penalty));
    }
    out.push_str(&format!("rings: {}\n{}", plan.schedule.rings.len(), plan.schedule.to_text()));
    out
}

/// Trains and writes the run directory: resolved config, plan, metrics,
/// staleness and averaging logs, summary and manifest.
pub fn execute(cfg: &ExperimentConfig, plan: &SessionPlan, topo: Topology, inputs: &[(&str, &Path)], out: &Path) -> Result<Summary> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = cfg.dataset()?;
    let report = train(&cfg.train, plan, topo, data)?;
    let summary = Summary::from_report(cfg, plan, &report);

    let write = |name: &str, text: String| -> Result<()> {
        std::fs::write(out.join(name), text).with_context(|| format!("writing {}", out.join(name).display()))
    };
    write("config.toml", cfg.to_toml_string())?;
    write("plan.toml", plan.to_toml_string())?;
    write("rings.txt", plan.schedule.to_text())?;
    let metrics = File::create(out.join("metrics.csv")).context("creating metrics.csv")?;
    write_metrics_csv(BufWriter::new(metrics), &report.rows)?;
    let staleness = File::create(out.join("staleness.csv")).context("creating staleness.csv")?;
    write_staleness_csv(BufWriter::new(staleness), &report.staleness)?;
    let averagings = File::create(out.join("averagings.csv")).context("creating averagings.csv")?;
    write_averagings_csv(BufWriter::new(averagings), &report.averagings)?;
    write("summary.toml", toml::to_string(&summary)?)?;

    let mut manifest = Manifest {
        ravnest_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    for (name, path) in inputs {
        manifest.inputs.insert(name.to_string(), sha256_file(path)?);
    }
    for name in ["config.toml", "plan.toml", "rings.txt", "metrics.csv", "staleness.csv", "averagings.csv", "summary.toml"] {
        manifest.outputs.insert(name.to_string(), sha256_file(&out.join(name))?);
    }
    write("manifest.toml", toml::to_string(&manifest)?)?;
    Ok(summary)
}

fn input_files<'a>(config: &'a Path, cfg: &'a ExperimentConfig, plan: Option<&'a Path>) -> Vec<(&'static str, &'a Path)> {
    let mut inputs = vec![("config", config)];
    if let Some(p) = &cfg.cluster.inventory {
        inputs.push(("inventory", p.as_path()));
    }
    if let Some(p) = &cfg.cluster.topology {
        inputs.push(("topology", p.as_path()));
    }
    if let Some(p) = plan {
        inputs.push(("plan", p));
    }
    inputs
}

pub fn train_command(config: &Path, plan_path: Option<&Path>, out: Option<&Path>, dry_run: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let (plan, topo) = plan_for(&cfg, plan_path)?;
    topo.validate()?;
    if dry_run {
        print!("{}", describe_plan(&plan));
        println!("dry run: config and plan are valid");
        return Ok(());
    }
    let out: PathBuf = match out.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone()) {
        Some(o) => o,
        None => bail!(ravnest::Error::Config("no run directory: pass --out or set output_dir".into())),
    };
    let summary = execute(&cfg, &plan, topo, &input_files(config, &cfg, plan_path), &out)?;
    print!("{}", toml::to_string(&summary)?);
    println!("run directory: {}", out.display());
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Cluster counts for GA formation; needs an inventory in the config.
    #[arg(long, value_delimiter = ',', conflicts_with = "clusters")]
    q: Vec<usize>,
    /// Cluster counts built from copies of the config's first cluster.
    #[arg(long, value_delimiter = ',')]
    clusters: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let base = load_config(&args.config)?;
    let (label, values) = match (args.q.is_empty(), args.clusters.is_empty()) {
        (false, _) => {
            if base.cluster.inventory.is_none() {
                bail!(ravnest::Error::Config("--q needs cluster.inventory in the config".into()));
            }
            ("q", args.q.clone())
        }
        (true, false) => ("c", args.clusters.clone()),
        (true, true) => bail!(ravnest::Error::Config("pass --q or --clusters".into())),
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut lines = vec![format!(
        "{label},status,clusters,updates,allreduce_count,virtual_time,updates_per_second,final_loss,max_tau,metrics_hash"
    )];
    for v in values {
        let mut cfg = base.clone();
        if label == "q" {
            cfg.cluster.q = Some(v);
        } else {
            let per = base.cluster.peers.first().copied().unwrap_or(1);
            cfg.cluster.inventory = None;
            cfg.cluster.topology = None;
            cfg.cluster.peers = vec![per; v];
        }
        cfg.validate()?;
        let dir = args.out.join(format!("{label}{v}"));
        let outcome = cfg.session().map_err(anyhow::Error::from).and_then(|(plan, topo)| {
            execute(&cfg, &plan, topo, &input_files(&args.config, &cfg, None), &dir)
        });
        match outcome {
            Ok(s) => {
                println!("{label}={v}: {} updates, {:.3} updates/s, final loss {:?}", s.updates, s.updates_per_second, s.final_loss);
                lines.push(format!(
                    "{v},ok,{},{},{},{},{},{},{},{}",
                    s.clusters,
                    s.updates,
                    s.allreduce_count,
                    s.virtual_time,
                    s.updates_per_second,
                    s.final_loss.map(|l| l.to_string()).unwrap_or_default(),
                    s.max_tau,
                    s.metrics_hash
                ));
            }
            Err(e) if matches!(e.downcast_ref::<ravnest::Error>(), Some(ravnest::Error::Session(_))) => {
                println!("{label}={v}: infeasible ({e})");
                lines.push(format!("{v},infeasible,{v},,,,,,,"));
            }
            Err(e) => return Err(e.context(format!("{label}={v}"))),
        }
    }
    let path = args.out.join("sweep.csv");
    std::fs::write(&path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("sweep summary: {}", path.display());
    Ok(())
}
