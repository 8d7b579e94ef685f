//! The global training loop.
//!
//! All clusters run their pipelines on one simulator. Every applied peer
//! update advances the global counter `t`; after an update that makes
//! `t % kappa == 0` the clusters average their parameters with the
//! multi-ring all-reduce over the same simulated network. In drain mode
//! admissions stop, in-flight batches finish (their updates still count and
//! any averaging they make due is folded into the pending one), and only then
//! do the rings start. In snapshot mode the rings start at once on a copy of
//! the parameters; updates applied while they run are re-applied on top of
//! the average.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::clusterform::SessionPlan;
use crate::data::{shard_indices, Batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_model, Model};
use crate::multiring::MultiRingAllReduce;
use crate::pipeline::{
    BatchSource, ClusterPipeline, ComputeCost, Outcome, PeerTimer, PipelineConfig, PipelineTrace, SamplerSource,
    StalenessRecord,
};
use crate::simnet::{Event, MessageKind, NodeId, Process, Simulator, Topology};

/// Averaging period in global updates; `None` never averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Kappa(pub Option<u64>);

impl Kappa {
    pub const NEVER: Kappa = Kappa(None);

    pub fn every(k: u64) -> Self {
        Kappa(Some(k))
    }

    pub fn due(&self, t: u64) -> bool {
        matches!(self.0, Some(k) if t % k == 0)
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(k) => write!(f, "{k}"),
            None => f.write_str("inf"),
        }
    }
}

impl Serialize for Kappa {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(k) => s.serialize_u64(k),
            None => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Kappa {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(Kappa(Some(k))),
            Raw::Text(s) if s == "inf" => Ok(Kappa(None)),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("kappa must be an integer or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BarrierMode {
    #[default]
    Drain,
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub kappa: Kappa,
    /// Staleness bound `T`; with `enforce_t` admissions are throttled to it.
    #[serde(default = "default_t_bound")]
    pub t_bound: u64,
    #[serde(default)]
    pub enforce_t: bool,
    /// Total number of peer updates `K`.
    pub k_target: u64,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub n_accum: usize,
    /// Defaults to each cluster's peer count.
    #[serde(default)]
    pub max_inflight: Option<usize>,
    #[serde(default)]
    pub barrier_mode: BarrierMode,
    /// Seed for initial parameters, sharding and batch order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cost: ComputeCost,
    /// Global-update interval between loss/gradient checkpoints; defaults
    /// to `kappa`.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

fn default_t_bound() -> u64 {
    16
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn new(eta: f64, kappa: Kappa, k_target: u64, batch_size: usize) -> Self {
        Self {
            eta,
            kappa,
            t_bound: default_t_bound(),
            enforce_t: false,
            k_target,
            batch_size,
            n_accum: 1,
            max_inflight: None,
            barrier_mode: BarrierMode::Drain,
            seed: 0,
            cost: ComputeCost::default(),
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.kappa.0 == Some(0) {
            return Err(Error::Config("kappa must be >= 1".into()));
        }
        if self.k_target == 0 || self.batch_size == 0 || self.n_accum == 0 || self.max_inflight == Some(0) {
            return Err(Error::Config("k_target, batch_size, n_accum and max_inflight must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    fn checkpoint_period(&self) -> Kappa {
        match self.checkpoint_every {
            Some(k) => Kappa::every(k),
            None => self.kappa,
        }
    }

    fn pipeline(&self, peers: usize) -> PipelineConfig {
        PipelineConfig {
            eta: self.eta,
            max_inflight: self.max_inflight.unwrap_or(peers),
            n_accum: self.n_accum,
            enforce_t: self.enforce_t,
            t_bound: self.t_bound,
            cost: self.cost,
        }
    }
}

/// Global update counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalClock {
    pub t: u64,
    pub per_cluster: Vec<u64>,
    /// Completed averaging cycles.
    pub cycle: u64,
    kappa: Kappa,
}

impl GlobalClock {
    pub fn new(clusters: usize, kappa: Kappa) -> Self {
        Self { t: 0, per_cluster: vec![0; clusters], cycle: 0, kappa }
    }

    /// Counts one update; returns whether averaging is now due.
    pub fn record_update(&mut self, cluster: usize) -> bool {
        let due = self.kappa.due(self.t + 1);
        self.t += 1;
        self.per_cluster[cluster] += 1;
        due
    }
}

/// One metrics row. Checkpoint rows leave `cluster`, `peer` and `tau` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub t: u64,
    pub cluster: Option<usize>,
    pub peer: Option<usize>,
    pub tau: Option<u64>,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub virtual_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragingRecord {
    pub cycle: u64,
    /// Clock value when averaging came due.
    pub requested_t: u64,
    /// Clock value when the averaged parameters were written back.
    pub t: u64,
    pub requested_at: f64,
    pub started_at: f64,
    pub finished_at: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    pub cluster_params: Vec<Vec<f64>>,
    pub clock: GlobalClock,
    pub averagings: Vec<AveragingRecord>,
    pub staleness: Vec<StalenessRecord>,
    pub traces: Vec<PipelineTrace>,
    pub virtual_time: f64,
    pub trace_hash: String,
}

impl TrainReport {
    /// Elementwise mean of the cluster vectors.
    pub fn averaged_params(&self) -> Vec<f64> {
        mean_of(&self.cluster_params)
    }

    pub fn max_tau(&self) -> u64 {
        self.staleness.iter().map(|r| r.tau).max().unwrap_or(0)
    }

    pub fn updates_per_second(&self) -> f64 {
        self.clock.t as f64 / self.virtual_time
    }
}

fn mean_of(vs: &[Vec<f64>]) -> Vec<f64> {
    let n = vs.len() as f64;
    let mut out = vs[0].clone();
    for v in &vs[1..] {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

#[derive(Debug)]
enum Phase {
    Running,
    Draining { requested_at: f64, requested_t: u64 },
    Reducing {
        machine: MultiRingAllReduce,
        requested_at: f64,
        requested_t: u64,
        started_at: f64,
        snapshot: Vec<Vec<f64>>,
        again: Option<(f64, u64)>,
    },
}

struct Trainer<'a> {
    model: Arc<Model>,
    plan: &'a SessionPlan,
    config: &'a TrainConfig,
    clusters: Vec<ClusterPipeline>,
    routes: BTreeMap<NodeId, usize>,
    clock: GlobalClock,
    phase: Phase,
    finished: bool,
    rows: Vec<MetricRow>,
    averagings: Vec<AveragingRecord>,
    full: Option<&'a Dataset>,
    checkpoints: Kappa,
}

impl Trainer<'_> {
    fn absorb<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>, c: usize) -> Result<()> {
        for o in self.clusters[c].take_outcomes() {
            let Outcome::Update { cluster, peer, tau, loss, time, .. } = o else { continue };
            if self.finished {
                continue;
            }
            if let Some(l) = loss {
                if !l.is_finite() {
                    return Err(Error::Divergence {
                        t: self.clock.t,
                        detail: format!("cluster {cluster} peer {peer} loss {l}"),
                        last_good: self.last_good(),
                    });
                }
            }
            let due = self.clock.record_update(cluster);
            self.rows.push(MetricRow {
                t: self.clock.t,
                cluster: Some(cluster),
                peer: Some(peer),
                tau: Some(tau),
                loss,
                grad_norm: None,
                virtual_time: time,
            });
            let standalone = self.clusters.len() == 1 || self.config.checkpoint_every.is_some();
            if standalone && self.checkpoints.due(self.clock.t) {
                self.checkpoint(sim.now())?;
            }
            if due && self.clusters.len() > 1 {
                self.request_averaging(sim)?;
            }
            if self.clock.t >= self.config.k_target {
                self.finished = true;
                for cl in &mut self.clusters {
                    cl.set_paused(true);
                }
                if let Phase::Draining { requested_at, requested_t } = self.phase {
                    self.start_reduce(sim, requested_at, requested_t)?;
                }
            }
        }
        Ok(())
    }

    fn last_good(&self) -> String {
        match self.averagings.last() {
            Some(a) => format!("averaging cycle {} at t={}", a.cycle, a.t),
            None => "initial parameters".into(),
        }
    }

    fn request_averaging<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>) -> Result<()> {
        let now = sim.now();
        let t = self.clock.t;
        match &mut self.phase {
            Phase::Running => match self.config.barrier_mode {
                BarrierMode::Drain => {
                    for cl in &mut self.clusters {
                        cl.set_paused(true);
                    }
                    self.phase = Phase::Draining { requested_at: now, requested_t: t };
                }
                BarrierMode::Snapshot => self.start_reduce(sim, now, t)?,
            },
            Phase::Draining { .. } => {}
            Phase::Reducing { again, .. } => {
                again.get_or_insert((now, t));
            }
        }
        Ok(())
    }

    fn start_reduce<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>, requested_at: f64, requested_t: u64) -> Result<()> {
        let snapshot: Vec<Vec<f64>> = self.clusters.iter().map(|c| c.params().to_vec()).collect();
        let refs: Vec<&[f64]> = snapshot.iter().map(Vec::as_slice).collect();
        let mut machine = MultiRingAllReduce::new(&self.plan.schedule, &self.plan.endpoints(), &refs)?;
        machine.start(sim)?;
        self.phase = Phase::Reducing { machine, requested_at, requested_t, started_at: sim.now(), snapshot, again: None };
        Ok(())
    }

    fn maybe_start_after_drain<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>) -> Result<()> {
        if let Phase::Draining { requested_at, requested_t } = self.phase {
            if self.clusters.iter().all(ClusterPipeline::is_quiescent) {
                self.start_reduce(sim, requested_at, requested_t)?;
            }
        }
        Ok(())
    }

    fn finish_reduce<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>) -> Result<()> {
        let Phase::Reducing { machine, requested_at, requested_t, started_at, snapshot, again } =
            std::mem::replace(&mut self.phase, Phase::Running)
        else {
            unreachable!("called while reducing")
        };
        let mut averaged = snapshot.clone();
        machine.write_back(&mut averaged)?;
        for (c, cl) in self.clusters.iter_mut().enumerate() {
            let mut next = averaged[c].clone();
            if self.config.barrier_mode == BarrierMode::Snapshot {
                for ((n, cur), snap) in next.iter_mut().zip(cl.params()).zip(&snapshot[c]) {
                    *n += cur - snap;
                }
            }
            cl.set_params(next)?;
        }
        self.clock.cycle += 1;
        let now = sim.now();
        self.averagings.push(AveragingRecord {
            cycle: self.clock.cycle,
            requested_t,
            t: self.clock.t,
            requested_at,
            started_at,
            finished_at: now,
        });
        if self.config.checkpoint_every.is_none() {
            self.checkpoint(now)?;
        }
        if let Some((at, t)) = again {
            self.start_reduce(sim, at, t)?;
            return Ok(());
        }
        if self.finished {
            return Ok(());
        }
        for cl in &mut self.clusters {
            cl.set_paused(false);
            cl.admit_batch(sim)?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, now: f64) -> Result<()> {
        let Some(data) = self.full else { return Ok(()) };
        let params: Vec<Vec<f64>> = self.clusters.iter().map(|c| c.params().to_vec()).collect();
        let x = mean_of(&params);
        let (loss, grad) = self.model.loss_and_gradient(&x, &data.inputs, &data.targets)?;
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if !loss.is_finite() || !g2.is_finite() {
            return Err(Error::Divergence { t: self.clock.t, detail: format!("checkpoint loss {loss}"), last_good: self.last_good() });
        }
        self.rows.push(MetricRow {
            t: self.clock.t,
            cluster: None,
            peer: None,
            tau: None,
            loss: Some(loss),
            grad_norm: Some(g2),
            virtual_time: now,
        });
        Ok(())
    }
}

impl Process<PeerTimer> for Trainer<'_> {
    fn handle(&mut self, sim: &mut Simulator<PeerTimer>, event: Event<PeerTimer>) -> Result<()> {
        match event {
            Event::Deliver(msg) if msg.kind == MessageKind::RingChunk => {
                let Phase::Reducing { machine, .. } = &mut self.phase else {
                    return Err(Error::Protocol("ring chunk outside an averaging cycle".into()));
                };
                machine.on_chunk(sim, msg)?;
                if machine.is_done() {
                    self.finish_reduce(sim)?;
                }
            }
            Event::Deliver(msg) => {
                let c = *self
                    .routes
                    .get(&msg.receiver)
                    .ok_or_else(|| Error::Protocol(format!("message for unknown node {}", msg.receiver)))?;
                if self.finished {
                    return Ok(());
                }
                self.clusters[c].on_message(sim, msg)?;
                self.absorb(sim, c)?;
                self.after_event(sim, c)?;
            }
            Event::Timer(t) => {
                if self.finished {
                    return Ok(());
                }
                self.clusters[t.cluster].on_timer(sim, t.peer)?;
                self.absorb(sim, t.cluster)?;
                self.after_event(sim, t.cluster)?;
            }
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.finished && !matches!(self.phase, Phase::Reducing { .. })
    }

    fn blocked_report(&self) -> String {
        let phase = match &self.phase {
            Phase::Running => "running".to_string(),
            Phase::Draining { .. } => {
                let busy: Vec<String> =
                    self.clusters.iter().map(|c| format!("cluster {} in flight {}", c.cluster_id, c.inflight())).collect();
                format!("draining ({})", busy.join(", "))
            }
            Phase::Reducing { machine, .. } => match machine.first_stalled() {
                Some((ring, round, member)) => format!("all-reduce stalled at ring {ring} round {round} member {member}"),
                None => "all-reduce complete".into(),
            },
        };
        format!("t={} of {}; {phase}", self.clock.t, self.config.k_target)
    }
}

impl Trainer<'_> {
    fn after_event(&mut self, sim: &mut Simulator<PeerTimer>, c: usize) -> Result<()> {
        if self.finished {
            return Ok(());
        }
        match self.phase {
            Phase::Draining { .. } => self.maybe_start_after_drain(sim),
            _ => {
                self.clusters[c].admit_batch(sim)?;
                Ok(())
            }
        }
    }
}

/// Runs training with explicit batch sources, one per cluster.
pub fn train_with_sources(
    config: &TrainConfig,
    plan: &SessionPlan,
    topology: Topology,
    init: Vec<f64>,
    sources: Vec<Box<dyn BatchSource>>,
    full_data: Option<&Dataset>,
) -> Result<TrainReport> {
    config.validate()?;
    let model = Arc::new(Model::new(plan.model.clone())?);
    if sources.len() != plan.clusters.len() {
        return Err(Error::Config(format!("{} batch sources for {} clusters", sources.len(), plan.clusters.len())));
    }
    let mut routes = BTreeMap::new();
    let mut clusters = Vec::with_capacity(plan.clusters.len());
    for (cp, source) in plan.clusters.iter().zip(sources) {
        for n in &cp.nodes {
            if routes.insert(*n, cp.cluster_id).is_some() {
                return Err(Error::Session(format!("node {n} appears in more than one cluster")));
            }
        }
        let pc = config.pipeline(cp.nodes.len());
        clusters.push(ClusterPipeline::new(cp.cluster_id, model.clone(), &cp.submodels, &cp.nodes, init.clone(), source, pc)?);
    }
    let mut sim: Simulator<PeerTimer> = Simulator::new(topology)?.without_trace();
    let peers: u64 = plan.clusters.iter().map(|c| c.nodes.len() as u64).sum();
    let mut trainer = Trainer {
        model,
        plan,
        config,
        clusters,
        routes,
        clock: GlobalClock::new(plan.clusters.len(), config.kappa),
        phase: Phase::Running,
        finished: false,
        rows: Vec::new(),
        averagings: Vec::new(),
        full: full_data,
        checkpoints: config.checkpoint_period(),
    };
    for c in 0..trainer.clusters.len() {
        trainer.clusters[c].admit_batch(&mut sim)?;
    }
    let chunk_events: u64 = plan.schedule.rings.len() as u64 * 2 * plan.clusters.len() as u64 * plan.clusters.len() as u64;
    let budget = 64 * (config.k_target + 16) * (peers + 1) + chunk_events * (config.k_target + 1);
    let virtual_time = sim.run_until(&mut trainer, budget)?;
    Ok(TrainReport {
        rows: trainer.rows,
        cluster_params: trainer.clusters.iter().map(|c| c.params().to_vec()).collect(),
        clock: trainer.clock,
        averagings: trainer.averagings,
        staleness: trainer.clusters.iter().flat_map(|c| c.records().iter().copied()).collect(),
        traces: trainer.clusters.iter().map(ClusterPipeline::trace).collect(),
        virtual_time,
        trace_hash: sim.trace_hash(),
    })
}

/// Per-cluster samplers over disjoint shards of `data`.
pub fn cluster_samplers(data: &Dataset, clusters: usize, batch_size: usize, seed: u64) -> Result<Vec<BatchSampler>> {
    shard_indices(data.len(), clusters, seed)
        .into_iter()
        .enumerate()
        .map(|(c, shard)| BatchSampler::new(shard, batch_size, c, seed.wrapping_add(1 + c as u64)))
        .collect()
}

/// Trains from `build_model(plan.model, config.seed)` with sharded data.
pub fn train(config: &TrainConfig, plan: &SessionPlan, topology: Topology, data: Arc<Dataset>) -> Result<TrainReport> {
    let (_, init) = build_model(&plan.model, config.seed)?;
    let sources: Vec<Box<dyn BatchSource>> = cluster_samplers(&data, plan.clusters.len(), config.batch_size, config.seed)?
        .into_iter()
        .map(|sampler| Box::new(SamplerSource { sampler, data: data.clone() }) as Box<dyn BatchSource>)
        .collect();
    train_with_sources(config, plan, topology, init.into_values(), sources, Some(&data))
}

/// Uniform network covering every node of `plan`.
pub fn plan_topology(plan: &SessionPlan, bandwidth: f64, latency: f64) -> Topology {
    let max = plan.clusters.iter().flat_map(|c| c.nodes.iter().map(|n| n.0)).max().unwrap_or(0);
    Topology::uniform(max + 1, 1e12, bandwidth, latency)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    pub final_loss: Option<f64>,
    /// `(t, running mean of ||grad f||^2)` at each checkpoint.
    pub grad_norm_series: Vec<(u64, f64)>,
    pub rate_slope: f64,
}

/// Least-squares slope of `log(running mean)` against `log(t)` over the last
/// `tail` fraction of checkpoints.
pub fn measure_convergence(rows: &[MetricRow], tail: f64) -> Result<Convergence> {
    let checkpoints: Vec<(u64, f64, f64)> =
        rows.iter().filter_map(|r| Some((r.t, r.grad_norm?, r.loss.unwrap_or(f64::NAN)))).filter(|c| c.0 > 0).collect();
    if checkpoints.len() < 10 {
        return Err(Error::InsufficientData(format!("{} checkpoints, need at least 10", checkpoints.len())));
    }
    let mut sum = 0.0;
    let series: Vec<(u64, f64)> = checkpoints
        .iter()
        .enumerate()
        .map(|(i, &(t, g, _))| {
            sum += g;
            (t, sum / (i + 1) as f64)
        })
        .collect();
    let from = ((series.len() as f64) * (1.0 - tail.clamp(0.0, 1.0))).floor() as usize;
    let tail_pts: Vec<(f64, f64)> =
        series[from.min(series.len() - 2)..].iter().map(|&(t, m)| ((t as f64).ln(), m.max(f64::MIN_POSITIVE).ln())).collect();
    let n = tail_pts.len() as f64;
    let mx = tail_pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = tail_pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = tail_pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = tail_pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let rate_slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Ok(Convergence { final_loss: checkpoints.last().map(|c| c.2), grad_norm_series: series, rate_slope })
}

pub const METRICS_VERSION: &str = "# ravnest-metrics v1";
pub const METRICS_HEADER: &str = "t,cluster,peer,tau,loss,grad_norm,virtual_time";

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricRow]) -> Result<()> {
    let io = |e| Error::io("metrics csv", e);
    writeln!(out, "{METRICS_VERSION}").map_err(io)?;
    writeln!(out, "{METRICS_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.t,
            opt(r.cluster),
            opt(r.peer),
            opt(r.tau),
            opt(r.loss),
            opt(r.grad_norm),
            r.virtual_time
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn metrics_csv_string(rows: &[MetricRow]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

pub fn metrics_hash(rows: &[MetricRow]) -> String {
    hex::encode(Sha256::digest(metrics_csv_string(rows).as_bytes()))
}

/// Reads rows written by [`write_metrics_csv`]; other versions are rejected.
pub fn read_metrics_csv<R: Read>(input: R, origin: &str) -> Result<Vec<MetricRow>> {
    let mut lines = std::io::BufReader::new(input).lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::parse(origin, format!("missing {what}")))?
            .map_err(|e| Error::io(origin, e))
    };
    let version = next("version line")?;
    if version.trim() != METRICS_VERSION {
        return Err(Error::parse(origin, format!("unsupported metrics version {:?}", version.trim())));
    }
    let header = next("header")?;
    if header.trim() != METRICS_HEADER {
        return Err(Error::parse(origin, format!("unexpected header {:?}", header.trim())));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |d: String| Error::parse(origin, format!("row {}: {d}", i + 1));
        if f.len() != 7 {
            return Err(bad(format!("{} fields", f.len())));
        }
        fn field<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("cannot parse {s:?}"))
            }
        }
        rows.push(MetricRow {
            t: field(f[0]).map_err(bad)?.ok_or_else(|| bad("empty t".into()))?,
            cluster: field(f[1]).map_err(bad)?,
            peer: field(f[2]).map_err(bad)?,
            tau: field(f[3]).map_err(bad)?,
            loss: field(f[4]).map_err(bad)?,
            grad_norm: field(f[5]).map_err(bad)?,
            virtual_time: field(f[6]).map_err(bad)?.ok_or_else(|| bad("empty virtual_time".into()))?,
        });
    }
    Ok(rows)
}

pub const AVERAGINGS_VERSION: &str = "# ravnest-averagings v1";

/// One row per completed all-reduce, after a version line.
pub fn write_averagings_csv<W: Write>(mut out: W, records: &[AveragingRecord]) -> Result<()> {
    let io = |e| Error::io("averagings csv", e);
    writeln!(out, "{AVERAGINGS_VERSION}").map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| io(std::io::Error::other(e)))?;
    }
    if records.is_empty() {
        w.write_record(["cycle", "requested_t", "t", "requested_at", "started_at", "finished_at"])
            .map_err(|e| io(std::io::Error::other(e)))?;
    }
    w.flush().map_err(io)
}

pub fn read_averagings_csv<R: BufRead>(mut input: R, origin: &str) -> Result<Vec<AveragingRecord>> {
    let mut version = String::new();
    input.read_line(&mut version).map_err(|e| Error::io(origin, e))?;
    if version.trim() != AVERAGINGS_VERSION {
        return Err(Error::parse(origin, format!("unsupported averagings version {:?}", version.trim())));
    }
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|row| row.map_err(|e| Error::parse(origin, e)))
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RVNCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Magic, format version, update counter, dimension, then little-endian f64.
pub fn write_checkpoint<W: Write>(mut out: W, t: u64, params: &[f64]) -> Result<()> {
    let io = |e| Error::io("checkpoint", e);
    out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&t.to_le_bytes()).map_err(io)?;
    out.write_all(&(params.len() as u64).to_le_bytes()).map_err(io)?;
    for p in params {
        out.write_all(&p.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8], origin: &str) -> Result<(u64, Vec<f64>)> {
    let bad = |d: &str| Error::parse(origin, d);
    if bytes.len() < 28 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let t = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let dims = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let body = &bytes[28..];
    if body.len() != dims * 8 {
        return Err(bad(&format!("{dims} parameters declared, {} bytes present", body.len())));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((t, params))
}

pub fn save_checkpoint(path: &Path, t: u64, params: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), t, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(u64, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, &path.display().to_string())
}

/// Inputs of the step-size preset
/// `eta = C sqrt(N_m) / sqrt(K (2 N_m + L (sigma^2 + 8 s^2)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePreset {
    pub clusters: usize,
    pub n_m: usize,
    pub k: u64,
    pub lipschitz: f64,
    pub sigma2: f64,
    pub s2: f64,
}

impl RatePreset {
    pub fn eta(&self) -> f64 {
        let n = self.n_m as f64;
        self.clusters as f64 * n.sqrt() / (self.k as f64 * (2.0 * n + self.lipschitz * (self.sigma2 + 8.0 * self.s2))).sqrt()
    }
}

/// Measures `L`, `sigma^2` and `s^2` at `params`: `L` by power iteration on
/// finite-difference Hessian-vector products of the full gradient,
/// `sigma^2` as the mean squared deviation of minibatch gradients from the
/// full gradient, and `s^2` as the mean squared deviation of shard gradients.
pub fn estimate_rate_preset(
    model: &Model,
    params: &[f64],
    data: &Dataset,
    shards: &[Vec<usize>],
    batch_size: usize,
    k: u64,
    n_m: usize,
    seed: u64,
) -> Result<RatePreset> {
    let full = |x: &[f64]| -> Result<Vec<f64>> { Ok(model.loss_and_gradient(x, &data.inputs, &data.targets)?.1) };
    let g0 = full(params)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut lipschitz = 0.0;
    let eps = 1e-4 * (1.0 + norm(params));
    for _ in 0..60 {
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let plus: Vec<f64> = params.iter().zip(&v).map(|(p, d)| p + eps * d).collect();
        let minus: Vec<f64> = params.iter().zip(&v).map(|(p, d)| p - eps * d).collect();
        let (gp, gm) = (full(&plus)?, full(&minus)?);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        lipschitz = norm(&hv);
        if lipschitz == 0.0 {
            break;
        }
        v = hv;
    }
    let draws = 64;
    let mut sigma2 = 0.0;
    for _ in 0..draws {
        let rows: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let b = data.subset(&rows);
        let (_, g) = model.loss_and_gradient(params, &b.inputs, &b.targets)?;
        sigma2 += g.iter().zip(&g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    sigma2 /= draws as f64;
    let mut s2 = 0.0;
    for shard in shards {
        let d = data.subset(shard);
        let (_, g) = model.loss_and_gradient(params, &d.inputs, &d.targets)?;
        s2 += g.iter().zip(&g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    s2 /= shards.len().max(1) as f64;
    Ok(RatePreset { clusters: shards.len(), n_m, k, lipschitz, sigma2, s2 })
}

/// The batches a training run will draw for each cluster, in order.
pub fn preview_batches(data: &Dataset, clusters: usize, batch_size: usize, seed: u64, n: usize) -> Result<Vec<Vec<Batch>>> {
    Ok(cluster_samplers(data, clusters, batch_size, seed)?.iter().map(|s| s.preview(data, n)).collect())
}

/// Mean full-data loss of `params`.
pub fn full_loss(model: &Model, params: &[f64], data: &Dataset) -> Result<f64> {
    model.loss_value(params, &data.inputs, &data.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::model::{Activation, Loss, ModelSpec};
    use crate::oracle;

    fn linear_data(samples: usize, features: usize, noise: f64) -> Arc<Dataset> {
        Arc::new(DatasetSpec::Linear { samples, features, outputs: 1, noise, seed: 5 }.generate().unwrap())
    }

    #[test]
    fn kappa_parses_integer_and_inf() {
        #[derive(Deserialize)]
        struct W {
            k: Kappa,
        }
        assert_eq!(toml::from_str::<W>("k = 5").unwrap().k, Kappa::every(5));
        assert_eq!(toml::from_str::<W>("k = \"inf\"").unwrap().k, Kappa::NEVER);
        assert!(toml::from_str::<W>("k = \"often\"").is_err());
    }

    #[test]
    fn clock_fires_on_multiples() {
        let mut c = GlobalClock::new(2, Kappa::every(3));
        let fired: Vec<bool> = (0..7).map(|i| c.record_update(i % 2)).collect();
        assert_eq!(fired, vec![false, false, true, false, false, true, false]);
        assert_eq!(c.t, c.per_cluster.iter().sum::<u64>());
    }

    #[test]
    fn single_node_matches_sgd_bitwise() {
        let data = linear_data(64, 4, 0.1);
        let spec = ModelSpec::linear(4, 1);
        let plan = SessionPlan::uniform(&spec, 8, &[1]).unwrap();
        let cfg = TrainConfig::new(0.05, Kappa::NEVER, 40, 8);
        let report = train(&cfg, &plan, plan_topology(&plan, 1e9, 1e-4), data.clone()).unwrap();
        let (_, init) = build_model(&spec, 0).unwrap();
        let batches = preview_batches(&data, 1, 8, 0, 40).unwrap();
        let traj = oracle::sgd_reference(&spec, init.values(), &batches[0], 0.05, 1);
        assert_eq!(report.cluster_params[0], traj[40]);
        assert_eq!(report.clock.t, 40);
    }

    #[test]
    fn synchronous_two_clusters_match_averaged_sgd() {
        let data = linear_data(128, 3, 0.1);
        let spec = ModelSpec::new(vec![3, 4, 1], Activation::Tanh, Loss::Mse);
        let plan = SessionPlan::uniform(&spec, 4, &[1, 1]).unwrap();
        let mut cfg = TrainConfig::new(0.1, Kappa::every(1), 60, 4);
        cfg.max_inflight = Some(1);
        let report = train(&cfg, &plan, plan_topology(&plan, 1e9, 1e-4), data.clone()).unwrap();
        let (_, init) = build_model(&spec, 0).unwrap();
        let batches = preview_batches(&data, 2, 4, 0, 30).unwrap();
        let traj = oracle::averaged_sgd_reference(&spec, init.values(), &batches, 0.1);
        let rep = oracle::OracleReport::compare("sync", &report.cluster_params[0], &traj[30], 1e-10);
        assert!(rep.pass, "{rep:?}");
        assert_eq!(report.cluster_params[0], report.cluster_params[1]);
    }

    #[test]
    fn averaging_count_and_agreement() {
        let data = linear_data(256, 4, 0.1);
        let spec = ModelSpec::new(vec![4, 6, 1], Activation::Relu, Loss::Mse);
        let plan = SessionPlan::uniform(&spec, 4, &[2, 1, 2, 1]).unwrap();
        let cfg = TrainConfig::new(0.02, Kappa::every(50), 1000, 4);
        let report = train(&cfg, &plan, plan_topology(&plan, 1e9, 1e-5), data).unwrap();
        assert_eq!(report.averagings.len(), 20);
        assert_eq!(report.clock.t, 1000);
        for c in &report.cluster_params[1..] {
            assert_eq!(c, &report.cluster_params[0]);
        }
    }

    #[test]
    fn zero_eta_is_bitwise_stationary() {
        let data = linear_data(128, 4, 0.1);
        let spec = ModelSpec::new(vec![4, 5, 1], Activation::Tanh, Loss::Mse);
        let plan = SessionPlan::uniform(&spec, 4, &[2, 1, 1]).unwrap();
        let cfg = TrainConfig::new(0.0, Kappa::every(7), 200, 4);
        let report = train(&cfg, &plan, plan_topology(&plan, 1e9, 1e-5), data).unwrap();
        let (_, init) = build_model(&spec, 0).unwrap();
        assert!(report.averagings.len() >= 20);
        for c in &report.cluster_params {
            assert_eq!(c.as_slice(), init.values());
        }
    }

    #[test]
    fn drain_lands_inflight_update_before_averaging() {
        let data = linear_data(128, 4, 0.1);
        let spec = ModelSpec::new(vec![4, 5, 1], Activation::Tanh, Loss::Mse);
        let plan = SessionPlan::uniform(&spec, 4, &[2, 2]).unwrap();
        let cfg = TrainConfig::new(0.01, Kappa::every(5), 100, 4);
        let report = train(&cfg, &plan, plan_topology(&plan, 1e9, 1e-5), data).unwrap();
        for a in &report.averagings {
            let before = report.rows.iter().filter(|r| r.cluster.is_some() && r.t <= a.t);
            assert!(before.clone().all(|r| r.virtual_time <= a.started_at));
            let after = report.rows.iter().filter(|r| r.cluster.is_some() && r.t > a.t);
            assert!(after.clone().all(|r| r.virtual_time >= a.finished_at));
        }
    }

    #[test]
    fn snapshot_mode_keeps_every_update() {
        let data = linear_data(128, 4, 0.1);
        let spec = ModelSpec::new(vec![4, 5, 1], Activation::Tanh, Loss::Mse);
        let plan = SessionPlan::uniform(&spec, 4, &[2, 2]).unwrap();
        let mut cfg = TrainConfig::new(0.01, Kappa::every(5), 200, 4);
        cfg.barrier_mode = BarrierMode::Snapshot;
        cfg.enforce_t = true;
        cfg.t_bound = 1;
        let report = train(&cfg, &plan, plan_topology(&plan, 1e9, 1e-5), data).unwrap();
        assert_eq!(report.clock.t, 200);
        assert!(report.averagings.len() >= 20);
        assert!(report.max_tau() <= 1);
    }

    #[test]
    fn deterministic_metrics() {
        let data = linear_data(128, 4, 0.1);
        let spec = ModelSpec::new(vec![4, 5, 1], Activation::Tanh, Loss::Mse);
        let plan = SessionPlan::uniform(&spec, 4, &[2, 1]).unwrap();
        let cfg = TrainConfig::new(0.01, Kappa::every(10), 300, 4);
        let topo = plan_topology(&plan, 1e9, 1e-5);
        let a = train(&cfg, &plan, topo.clone(), data.clone()).unwrap();
        let b = train(&cfg, &plan, topo, data).unwrap();
        assert_eq!(metrics_hash(&a.rows), metrics_hash(&b.rows));
        assert_eq!(a.trace_hash, b.trace_hash);
    }

    #[test]
    fn metrics_roundtrip_and_version_check() {
        let rows = vec![
            MetricRow { t: 1, cluster: Some(0), peer: Some(1), tau: Some(2), loss: None, grad_norm: None, virtual_time: 0.25 },
            MetricRow { t: 1, cluster: None, peer: None, tau: None, loss: Some(0.5), grad_norm: Some(1e-3), virtual_time: 0.3 },
        ];
        let text = metrics_csv_string(&rows);
        assert!(text.starts_with("# ravnest-metrics v1\nt,cluster,peer,tau,loss,grad_norm,virtual_time\n"));
        assert_eq!(read_metrics_csv(text.as_bytes(), "mem").unwrap(), rows);
        let other = text.replace("v1", "v9");
        assert!(matches!(read_metrics_csv(other.as_bytes(), "mem"), Err(Error::Parse { .. })));
    }

    #[test]
    fn averagings_roundtrip_and_version_check() {
        let rec = AveragingRecord { cycle: 1, requested_t: 20, t: 23, requested_at: 0.5, started_at: 0.75, finished_at: 1.0 };
        for records in [vec![], vec![rec, AveragingRecord { cycle: 2, ..rec }]] {
            let mut buf = Vec::new();
            write_averagings_csv(&mut buf, &records).unwrap();
            assert_eq!(read_averagings_csv(buf.as_slice(), "mem").unwrap(), records);
            let text = String::from_utf8(buf).unwrap().replace("v1", "v0");
            assert!(matches!(read_averagings_csv(text.as_bytes(), "mem"), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, 42, &[1.5, -0.0, f64::MIN_POSITIVE]).unwrap();
        let (t, p) = read_checkpoint(&buf, "mem").unwrap();
        assert_eq!(t, 42);
        assert_eq!(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), [1.5, -0.0, f64::MIN_POSITIVE].map(f64::to_bits));
        buf[8] = 7;
        assert!(read_checkpoint(&buf, "mem").is_err());
    }

    #[test]
    fn convergence_needs_ten_checkpoints_and_flat_is_zero() {
        let row = |t: u64, g: f64| MetricRow { t, cluster: None, peer: None, tau: None, loss: Some(1.0), grad_norm: Some(g), virtual_time: 0.0 };
        let few: Vec<MetricRow> = (1..5).map(|t| row(t, 1.0)).collect();
        assert!(matches!(measure_convergence(&few, 0.5), Err(Error::InsufficientData(_))));
        let flat: Vec<MetricRow> = (1..30).map(|t| row(t * 10, 2.0)).collect();
        assert_eq!(measure_convergence(&flat, 0.5).unwrap().rate_slope, 0.0);
        let decaying: Vec<MetricRow> = (1..200).map(|t| row(t, if t == 1 { 1.0 } else { 0.0 })).collect();
        assert!((measure_convergence(&decaying, 0.5).unwrap().rate_slope + 1.0).abs() < 1e-9);
    }

    #[test]
    fn preset_matches_formula() {
        let p = RatePreset { clusters: 2, n_m: 1, k: 100, lipschitz: 2.0, sigma2: 1.0, s2: 0.5 };
        let expect = 2.0 / (100.0f64 * (2.0 + 2.0 * 5.0)).sqrt();
        assert!((p.eta() - expect).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_of_linear_regression() {
        let data = linear_data(200, 3, 0.0);
        let spec = ModelSpec::linear(3, 1);
        let (m, p) = build_model(&spec, 1).unwrap();
        let shards = shard_indices(200, 2, 1);
        let preset = estimate_rate_preset(&m, p.values(), &data, &shards, 8, 1000, 1, 3).unwrap();
        // Hessian of the MSE is 2/n [X 1]^T [X 1]; check against a Rayleigh
        // quotient bound from the data directly.
        let n = data.len() as f64;
        let mut trace = 0.0;
        for s in 0..data.len() {
            trace += 1.0 + data.inputs.row(s).iter().map(|x| x * x).sum::<f64>();
        }
        let trace = 2.0 * trace / n;
        assert!(preset.lipschitz > 0.0 && preset.lipschitz <= trace * (1.0 + 1e-6));
        assert!(preset.lipschitz >= trace / 4.0);
        assert!(preset.sigma2 > 0.0);
    }
}
