//! Asynchronous pipeline execution inside one cluster.
//!
//! Each peer owns a contiguous range of layers, a single-slot forward buffer
//! and a single-slot backward buffer. A sender transmits only after the
//! receiving slot has been freed, which the receiver signals with a zero-byte
//! control message. An idle peer serves its backward buffer first, then its
//! forward buffer, and applies each (possibly stale) gradient as soon as the
//! backward pass finishes.
//!
//! The forward pass stores the weights it used, so a backward pass computes
//! the gradient at exactly the parameter version that produced the
//! activations. Compute happens at the start of a work item; its effects
//! (outgoing message, parameter update) land when the completion timer fires.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, ForwardContext, GradAccumulator, Matrix, Model, SubmodelSpec};
use crate::simnet::{Event, Message, MessageKind, NodeId, Process, Simulator, Topology};

pub mod realtime;

/// Virtual compute cost: a forward pass over `rows` samples on a submodel
/// with `n` parameters takes `seconds_per_param_sample * n * rows / speed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeCost {
    pub seconds_per_param_sample: f64,
    pub backward_ratio: f64,
}

impl Default for ComputeCost {
    fn default() -> Self {
        Self { seconds_per_param_sample: 1e-9, backward_ratio: 2.0 }
    }
}

impl ComputeCost {
    pub fn forward_seconds(&self, params: usize, rows: usize, speed: f64) -> f64 {
        self.seconds_per_param_sample * params as f64 * rows as f64 / speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub eta: f64,
    /// Upper bound on batches admitted but not yet finished at peer 0.
    pub max_inflight: usize,
    pub n_accum: usize,
    pub enforce_t: bool,
    pub t_bound: u64,
    pub cost: ComputeCost,
}

impl PipelineConfig {
    /// `max_inflight = peers`, immediate updates, no enforcement.
    pub fn new(eta: f64, peers: usize) -> Self {
        Self { eta, max_inflight: peers.max(1), n_accum: 1, enforce_t: false, t_bound: u64::MAX, cost: ComputeCost::default() }
    }

    /// Admission cap actually used; enforcement limits in-flight work so that
    /// no peer can see more than `t_bound` intervening updates.
    pub fn effective_inflight(&self) -> usize {
        let cap = self.max_inflight.max(1);
        if self.enforce_t {
            let by_bound = self.t_bound.saturating_add(1).min(usize::MAX as u64) as usize;
            cap.min(by_bound)
        } else {
            cap
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.max_inflight == 0 {
            return Err(Error::Config("max_inflight must be >= 1".into()));
        }
        if self.n_accum == 0 {
            return Err(Error::Config("n_accum must be >= 1".into()));
        }
        if !(self.cost.seconds_per_param_sample >= 0.0) || !(self.cost.backward_ratio >= 0.0) {
            return Err(Error::Config("compute cost must be non-negative".into()));
        }
        Ok(())
    }
}

/// Completion of the work item a peer is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PeerTimer {
    pub cluster: usize,
    pub peer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StalenessRecord {
    pub cluster: usize,
    pub batch_id: u64,
    pub peer: usize,
    pub tau: u64,
    /// The peer's update count after this backward pass.
    pub update_index: u64,
    pub virtual_time: f64,
}

/// Things the surrounding driver needs to know about, in the order they
/// happened.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Update { cluster: usize, peer: usize, batch_id: u64, tau: u64, loss: Option<f64>, time: f64 },
    BatchDone { cluster: usize, batch_id: u64, time: f64 },
}

pub trait BatchSource {
    fn next_batch(&mut self) -> Option<Batch>;
}

impl BatchSource for VecDeque<Batch> {
    fn next_batch(&mut self) -> Option<Batch> {
        self.pop_front()
    }
}

/// Endless epochs over a shard.
pub struct SamplerSource {
    pub sampler: BatchSampler,
    pub data: Arc<Dataset>,
}

impl BatchSource for SamplerSource {
    fn next_batch(&mut self) -> Option<Batch> {
        Some(self.sampler.next_batch(&self.data))
    }
}

#[derive(Debug, Clone)]
struct Slot {
    batch_id: u64,
    data: Matrix,
}

#[derive(Debug, Clone)]
struct Saved {
    ctx: ForwardContext,
    weights: Vec<f64>,
    version: u64,
}

#[derive(Debug, Clone)]
enum Work {
    Forward { batch_id: u64, output: Matrix },
    ForwardLast { batch_id: u64, loss: f64, grad: Matrix },
    Backward { batch_id: u64, grads: Vec<f64>, input_grad: Matrix, tau: u64 },
}

/// One peer of a cluster pipeline.
#[derive(Debug, Clone)]
pub struct PeerState {
    pub cluster_id: usize,
    pub peer_index: usize,
    pub node: NodeId,
    pub sub: SubmodelSpec,
    pub update_count: u64,
    forward_buffer: Option<Slot>,
    backward_buffer: Option<Slot>,
    saved: BTreeMap<u64, Saved>,
    accum: GradAccumulator,
    running: Option<(f64, Work)>,
    fwd_out: Option<Message>,
    bwd_out: Option<Message>,
    downstream_free: bool,
    upstream_free: bool,
    busy: Vec<(f64, f64)>,
}

impl PeerState {
    fn new(cluster_id: usize, peer_index: usize, node: NodeId, sub: SubmodelSpec, n_accum: usize) -> Self {
        let len = sub.param_count();
        Self {
            cluster_id,
            peer_index,
            node,
            sub,
            update_count: 0,
            forward_buffer: None,
            backward_buffer: None,
            saved: BTreeMap::new(),
            accum: GradAccumulator::new(n_accum, len),
            running: None,
            fwd_out: None,
            bwd_out: None,
            downstream_free: true,
            upstream_free: true,
            busy: Vec::new(),
        }
    }

    pub fn saved_contexts(&self) -> usize {
        self.saved.len()
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_none()
    }

    /// Busy intervals `(start, end)` of completed work items.
    pub fn busy_intervals(&self) -> &[(f64, f64)] {
        &self.busy
    }
}

/// Timeline data for bubble measurement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineTrace {
    pub busy: Vec<Vec<(f64, f64)>>,
    pub admissions: Vec<f64>,
    /// `(time, in-flight count after the change)`.
    pub inflight: Vec<(f64, usize)>,
}

/// A cluster: peers in pipeline order plus its full parameter vector.
pub struct ClusterPipeline {
    pub cluster_id: usize,
    model: Arc<Model>,
    config: PipelineConfig,
    peers: Vec<PeerState>,
    params: Vec<f64>,
    labels: BTreeMap<u64, Matrix>,
    losses: BTreeMap<u64, f64>,
    source: Box<dyn BatchSource>,
    next_id: u64,
    inflight: usize,
    admissions: Vec<f64>,
    inflight_log: Vec<(f64, usize)>,
    outcomes: Vec<Outcome>,
    records: Vec<StalenessRecord>,
    exhausted: bool,
    paused: bool,
    limit: Option<u64>,
}

impl ClusterPipeline {
    /// `subs[p]` and `nodes[p]` describe peer `p`; `params` is the full model
    /// vector in global index order.
    pub fn new(
        cluster_id: usize,
        model: Arc<Model>,
        subs: &[SubmodelSpec],
        nodes: &[NodeId],
        params: Vec<f64>,
        source: Box<dyn BatchSource>,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if subs.is_empty() || subs.len() != nodes.len() {
            return Err(Error::Config(format!("{} submodels for {} nodes", subs.len(), nodes.len())));
        }
        if params.len() != model.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model of {}", params.len(), model.param_count())));
        }
        let mut next = 0;
        for s in subs {
            if s.layers.start != next {
                return Err(Error::Layout(format!("submodels do not tile the layers at {}", next)));
            }
            next = s.layers.end;
        }
        if next != model.layers().len() {
            return Err(Error::Layout(format!("submodels cover {next} of {} layers", model.layers().len())));
        }
        let peers = subs
            .iter()
            .zip(nodes)
            .enumerate()
            .map(|(p, (s, &n))| PeerState::new(cluster_id, p, n, s.clone(), config.n_accum))
            .collect();
        Ok(Self {
            cluster_id,
            model,
            config,
            peers,
            params,
            labels: BTreeMap::new(),
            losses: BTreeMap::new(),
            source,
            next_id: 0,
            inflight: 0,
            admissions: Vec::new(),
            inflight_log: vec![(0.0, 0)],
            outcomes: Vec::new(),
            records: Vec::new(),
            exhausted: false,
            paused: false,
            limit: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn peers(&self) -> &[PeerState] {
        &self.peers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces the parameters, e.g. after averaging. Saved contexts keep the
    /// weights they were computed with.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("{} parameters, expected {}", params.len(), self.params.len())));
        }
        self.params = params;
        Ok(())
    }

    pub fn inflight(&self) -> usize {
        self.inflight
    }

    /// Nothing admitted is still being processed.
    pub fn is_quiescent(&self) -> bool {
        self.inflight == 0
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    /// While paused no batch is admitted; in-flight work continues.
    pub fn set_paused(&mut self, paused: bool) {
        self.paused = paused;
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Stops admission after `limit` batches in total.
    pub fn set_admission_limit(&mut self, limit: Option<u64>) {
        self.limit = limit;
    }

    pub fn admitted(&self) -> u64 {
        self.next_id
    }

    pub fn update_count(&self) -> u64 {
        self.peers.iter().map(|p| p.update_count).sum()
    }

    pub fn records(&self) -> &[StalenessRecord] {
        &self.records
    }

    pub fn take_outcomes(&mut self) -> Vec<Outcome> {
        std::mem::take(&mut self.outcomes)
    }

    pub fn trace(&self) -> PipelineTrace {
        PipelineTrace {
            busy: self.peers.iter().map(|p| p.busy.clone()).collect(),
            admissions: self.admissions.clone(),
            inflight: self.inflight_log.clone(),
        }
    }

    pub fn peer_of(&self, node: NodeId) -> Option<usize> {
        self.peers.iter().position(|p| p.node == node)
    }

    /// Offers the next batch to peer 0. Accepted only when its forward slot
    /// is empty and fewer than the admission cap are in flight.
    pub fn admit_batch<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>) -> Result<bool> {
        if self.exhausted
            || self.paused
            || self.limit.is_some_and(|l| self.next_id >= l)
            || self.peers[0].forward_buffer.is_some()
            || self.inflight >= self.config.effective_inflight()
        {
            return Ok(false);
        }
        let Some(batch) = self.source.next_batch() else {
            self.exhausted = true;
            return Ok(false);
        };
        let id = self.next_id;
        self.next_id += 1;
        self.labels.insert(id, batch.targets);
        self.peers[0].forward_buffer = Some(Slot { batch_id: id, data: batch.inputs });
        self.inflight += 1;
        let now = sim.now();
        self.admissions.push(now);
        self.inflight_log.push((now, self.inflight));
        self.service_peer(sim, 0)?;
        Ok(true)
    }

    /// Handles an activation, gradient or credit addressed to one of this
    /// cluster's peers.
    pub fn on_message<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>, msg: Message) -> Result<()> {
        let p = self
            .peer_of(msg.receiver)
            .ok_or_else(|| Error::Protocol(format!("{} is not in cluster {}", msg.receiver, self.cluster_id)))?;
        let from = self
            .peer_of(msg.sender)
            .ok_or_else(|| Error::Protocol(format!("{} is not in cluster {}", msg.sender, self.cluster_id)))?;
        match msg.kind {
            MessageKind::Activation => {
                if from + 1 != p {
                    return Err(Error::Protocol(format!("activation from peer {from} to peer {p}")));
                }
                if self.peers[p].forward_buffer.is_some() {
                    return Err(Error::FlowControl(format!(
                        "cluster {} peer {p}: activation for batch {} while forward buffer is full",
                        self.cluster_id, msg.step_tag
                    )));
                }
                let cols = self.model.layers()[self.peers[p].sub.layers.start].fan_in;
                let data = Matrix::from_vec(msg.payload.len() / cols.max(1), cols, msg.payload)?;
                self.peers[p].forward_buffer = Some(Slot { batch_id: msg.step_tag, data });
            }
            MessageKind::Gradient => {
                if p + 1 != from {
                    return Err(Error::Protocol(format!("gradient from peer {from} to peer {p}")));
                }
                if self.peers[p].backward_buffer.is_some() {
                    return Err(Error::FlowControl(format!(
                        "cluster {} peer {p}: gradient for batch {} while backward buffer is full",
                        self.cluster_id, msg.step_tag
                    )));
                }
                let cols = self.model.layers()[self.peers[p].sub.layers.end - 1].fan_out;
                let data = Matrix::from_vec(msg.payload.len() / cols.max(1), cols, msg.payload)?;
                self.peers[p].backward_buffer = Some(Slot { batch_id: msg.step_tag, data });
            }
            MessageKind::Control => {
                if from == p + 1 {
                    self.peers[p].downstream_free = true;
                } else if from + 1 == p {
                    self.peers[p].upstream_free = true;
                } else {
                    return Err(Error::Protocol(format!("credit from peer {from} to peer {p}")));
                }
                self.flush(sim, p)?;
            }
            MessageKind::RingChunk => {
                return Err(Error::Protocol("ring chunk delivered to a pipeline".into()));
            }
        }
        self.service_peer(sim, p)
    }

    /// Handles the completion timer of peer `p`.
    pub fn on_timer<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>, p: usize) -> Result<()> {
        let now = sim.now();
        let last = self.peers.len() - 1;
        let peer = &mut self.peers[p];
        let (start, work) = peer
            .running
            .take()
            .ok_or_else(|| Error::Protocol(format!("cluster {} peer {p}: timer while idle", self.cluster_id)))?;
        peer.busy.push((start, now));
        match work {
            Work::Forward { batch_id, output } => {
                let to = self.peers[p + 1].node;
                self.peers[p].fwd_out =
                    Some(Message::new(MessageKind::Activation, self.peers[p].node, to, batch_id, output.into_vec()));
                self.flush(sim, p)?;
            }
            Work::ForwardLast { batch_id, loss, grad } => {
                debug_assert_eq!(p, last);
                self.losses.insert(batch_id, loss);
                self.peers[p].backward_buffer = Some(Slot { batch_id, data: grad });
            }
            Work::Backward { batch_id, grads, input_grad, tau } => {
                let range = self.peers[p].sub.params.clone();
                let applied = match self.peers[p].accum.push(grads) {
                    Some(step) => {
                        model::apply_update(&mut self.params[range], &step, self.config.eta)?;
                        self.peers[p].update_count += 1;
                        true
                    }
                    None => false,
                };
                let peer = &self.peers[p];
                self.records.push(StalenessRecord {
                    cluster: self.cluster_id,
                    batch_id,
                    peer: p,
                    tau,
                    update_index: peer.update_count,
                    virtual_time: now,
                });
                let loss = if p == last { self.losses.remove(&batch_id) } else { None };
                if applied {
                    self.outcomes.push(Outcome::Update { cluster: self.cluster_id, peer: p, batch_id, tau, loss, time: now });
                }
                if p > 0 {
                    let to = self.peers[p - 1].node;
                    self.peers[p].bwd_out =
                        Some(Message::new(MessageKind::Gradient, self.peers[p].node, to, batch_id, input_grad.into_vec()));
                    self.flush(sim, p)?;
                } else {
                    self.inflight -= 1;
                    self.inflight_log.push((now, self.inflight));
                    self.outcomes.push(Outcome::BatchDone { cluster: self.cluster_id, batch_id, time: now });
                }
            }
        }
        self.service_peer(sim, p)
    }

    fn flush<T>(&mut self, sim: &mut Simulator<T>, p: usize) -> Result<()> {
        let peer = &mut self.peers[p];
        if peer.downstream_free {
            if let Some(msg) = peer.fwd_out.take() {
                peer.downstream_free = false;
                sim.send(msg)?;
            }
        }
        if peer.upstream_free {
            if let Some(msg) = peer.bwd_out.take() {
                peer.upstream_free = false;
                sim.send(msg)?;
            }
        }
        Ok(())
    }

    /// Starts the next work item on an idle peer: backward first, then
    /// forward. A peer only starts work whose result it has room to hold.
    pub fn service_peer<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>, p: usize) -> Result<()> {
        let last = self.peers.len() - 1;
        let peer = &self.peers[p];
        if peer.running.is_some() {
            return Ok(());
        }
        let can_backward = peer.backward_buffer.is_some() && (p == 0 || peer.bwd_out.is_none());
        let can_forward = peer.forward_buffer.is_some()
            && if p == last { peer.backward_buffer.is_none() } else { peer.fwd_out.is_none() };
        if can_backward {
            self.start_backward(sim, p)
        } else if can_forward {
            self.start_forward(sim, p)
        } else {
            Ok(())
        }
    }

    fn start_forward<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>, p: usize) -> Result<()> {
        let last = self.peers.len() - 1;
        let slot = self.peers[p].forward_buffer.take().expect("checked by caller");
        if p > 0 {
            sim.send(Message::control(self.peers[p].node, self.peers[p - 1].node, slot.batch_id))?;
        }
        let peer = &self.peers[p];
        let weights = self.params[peer.sub.params.clone()].to_vec();
        let (output, ctx) = model::forward(&self.model, &peer.sub, &weights, &slot.data)?;
        let rows = slot.data.rows();
        let speed = sim.topology().speed_factor(peer.node);
        let duration = self.config.cost.forward_seconds(peer.sub.param_count(), rows, speed);
        let version = peer.update_count;
        let work = if p == last {
            let targets = self
                .labels
                .remove(&slot.batch_id)
                .ok_or_else(|| Error::Protocol(format!("no labels for batch {}", slot.batch_id)))?;
            let (loss, grad) = self.model.loss().evaluate(&output, &targets)?;
            Work::ForwardLast { batch_id: slot.batch_id, loss, grad }
        } else {
            Work::Forward { batch_id: slot.batch_id, output }
        };
        let peer = &mut self.peers[p];
        peer.saved.insert(slot.batch_id, Saved { ctx, weights, version });
        if peer.saved.len() > self.config.max_inflight {
            return Err(Error::Protocol(format!(
                "cluster {} peer {p} holds {} saved contexts, limit {}",
                self.cluster_id,
                peer.saved.len(),
                self.config.max_inflight
            )));
        }
        peer.running = Some((sim.now(), work));
        sim.schedule(duration, PeerTimer { cluster: self.cluster_id, peer: p }.into());
        if p == 0 {
            self.admit_batch(sim)?;
        }
        Ok(())
    }

    fn start_backward<T: From<PeerTimer>>(&mut self, sim: &mut Simulator<T>, p: usize) -> Result<()> {
        let last = self.peers.len() - 1;
        let slot = self.peers[p].backward_buffer.take().expect("checked by caller");
        if p < last {
            sim.send(Message::control(self.peers[p].node, self.peers[p + 1].node, slot.batch_id))?;
        }
        let peer = &mut self.peers[p];
        let saved = peer.saved.remove(&slot.batch_id).ok_or_else(|| {
            Error::Protocol(format!("cluster {} peer {p}: backward for unknown batch {}", self.cluster_id, slot.batch_id))
        })?;
        let tau = peer.update_count - saved.version;
        if self.config.enforce_t && tau > self.config.t_bound {
            return Err(Error::Staleness {
                cluster: self.cluster_id,
                peer: p,
                batch_id: slot.batch_id,
                tau,
                bound: self.config.t_bound,
            });
        }
        let (grads, input_grad) = model::backward(&self.model, &peer.sub, &saved.weights, &saved.ctx, &slot.data)?;
        let speed = sim.topology().speed_factor(peer.node);
        let duration =
            self.config.cost.backward_ratio * self.config.cost.forward_seconds(peer.sub.param_count(), slot.data.rows(), speed);
        peer.running = Some((sim.now(), Work::Backward { batch_id: slot.batch_id, grads, input_grad, tau }));
        sim.schedule(duration, PeerTimer { cluster: self.cluster_id, peer: p }.into());
        Ok(())
    }
}

/// Idle fraction of each peer inside `[admit(warmup), admit(warmup + window)]`,
/// counted only while at least one batch is in flight, averaged over peers.
pub fn measure_bubble(trace: &PipelineTrace, warmup: usize, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::Measurement("bubble window must span at least one batch".into()));
    }
    if trace.admissions.len() <= warmup + window {
        return Err(Error::Measurement(format!(
            "trace has {} admissions, warmup {warmup} plus window {window} needs {}",
            trace.admissions.len(),
            warmup + window + 1
        )));
    }
    let (lo, hi) = (trace.admissions[warmup], trace.admissions[warmup + window]);
    let mut active = 0.0;
    for (i, &(t, n)) in trace.inflight.iter().enumerate() {
        let end = trace.inflight.get(i + 1).map_or(hi, |&(t2, _)| t2);
        if n > 0 {
            active += overlap(t, end, lo, hi);
        }
    }
    if !(active > 0.0) {
        return Err(Error::Measurement("no in-flight time inside the window".into()));
    }
    let idle: f64 = trace
        .busy
        .iter()
        .map(|intervals| {
            let busy: f64 = intervals.iter().map(|&(s, e)| overlap(s, e, lo, hi)).sum();
            (1.0 - busy / active).max(0.0)
        })
        .sum();
    Ok(idle / trace.busy.len() as f64)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub const STALENESS_VERSION: &str = "# ravnest-staleness v1";
const STALENESS_HEADER: [&str; 6] = ["cluster", "batch_id", "peer", "tau", "update_index", "virtual_time"];

/// Writes a version line, then `cluster,batch_id,peer,tau,update_index,virtual_time` rows.
pub fn write_staleness_csv<W: Write>(mut out: W, records: &[StalenessRecord]) -> Result<()> {
    writeln!(out, "{STALENESS_VERSION}").map_err(|e| Error::io("staleness csv", e))?;
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::io("staleness csv", std::io::Error::other(e));
    w.write_record(STALENESS_HEADER).map_err(io)?;
    for r in records {
        w.write_record([
            r.cluster.to_string(),
            r.batch_id.to_string(),
            r.peer.to_string(),
            r.tau.to_string(),
            r.update_index.to_string(),
            format!("{:?}", r.virtual_time),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("staleness csv", e))
}

/// Reads rows written by [`write_staleness_csv`]; other versions are rejected.
pub fn read_staleness_csv<R: std::io::BufRead>(mut input: R, origin: &str) -> Result<Vec<StalenessRecord>> {
    let mut version = String::new();
    input.read_line(&mut version).map_err(|e| Error::io(origin, e))?;
    if version.trim() != STALENESS_VERSION {
        return Err(Error::parse(origin, format!("unsupported staleness version {:?}", version.trim())));
    }
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers().map_err(|e| Error::parse(origin, e))?;
    if headers.iter().ne(STALENESS_HEADER) {
        return Err(Error::parse(origin, format!("unexpected header {headers:?}")));
    }
    rdr.deserialize::<(usize, u64, usize, u64, u64, f64)>()
        .map(|row| {
            let (cluster, batch_id, peer, tau, update_index, virtual_time) = row.map_err(|e| Error::parse(origin, e))?;
            Ok(StalenessRecord { cluster, batch_id, peer, tau, update_index, virtual_time })
        })
        .collect()
}

/// Result of a single-cluster run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub params: Vec<f64>,
    pub records: Vec<StalenessRecord>,
    pub trace: PipelineTrace,
    pub updates: Vec<Outcome>,
    pub batches_done: u64,
    pub virtual_time: f64,
    pub trace_hash: String,
}

struct Single {
    cluster: ClusterPipeline,
    target: u64,
    done: u64,
    updates: Vec<Outcome>,
}

impl Process<PeerTimer> for Single {
    fn handle(&mut self, sim: &mut Simulator<PeerTimer>, event: Event<PeerTimer>) -> Result<()> {
        match event {
            Event::Deliver(msg) => self.cluster.on_message(sim, msg)?,
            Event::Timer(t) => self.cluster.on_timer(sim, t.peer)?,
        }
        for o in self.cluster.take_outcomes() {
            match o {
                Outcome::BatchDone { .. } => self.done += 1,
                u @ Outcome::Update { .. } => self.updates.push(u),
            }
        }
        self.cluster.admit_batch(sim)?;
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.done >= self.target
    }

    fn blocked_report(&self) -> String {
        let states: Vec<String> = self
            .cluster
            .peers
            .iter()
            .map(|p| {
                format!(
                    "peer {}: running={} fwd={} bwd={} fwd_out={} bwd_out={}",
                    p.peer_index,
                    p.running.is_some(),
                    p.forward_buffer.is_some(),
                    p.backward_buffer.is_some(),
                    p.fwd_out.is_some(),
                    p.bwd_out.is_some()
                )
            })
            .collect();
        format!("{} of {} batches done; {}", self.done, self.target, states.join("; "))
    }
}

/// Runs one cluster until `batches` batches have completed their backward
/// pass at peer 0. Peer `p` lives on `nodes[p]` of `topology`.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    model: Arc<Model>,
    subs: &[SubmodelSpec],
    nodes: &[NodeId],
    topology: Topology,
    params: Vec<f64>,
    source: Box<dyn BatchSource>,
    config: PipelineConfig,
    batches: u64,
) -> Result<PipelineRun> {
    let mut cluster = ClusterPipeline::new(0, model, subs, nodes, params, source, config)?;
    cluster.set_admission_limit(Some(batches));
    let mut sim = Simulator::new(topology)?.without_trace();
    let mut driver = Single { cluster, target: batches, done: 0, updates: Vec::new() };
    if batches > 0 {
        driver.cluster.admit_batch(&mut sim)?;
    }
    let budget = 64 * (batches + 1) * driver.cluster.peers.len() as u64 + 1024;
    let virtual_time = sim.run_until(&mut driver, budget)?;
    let trace = driver.cluster.trace();
    Ok(PipelineRun {
        params: driver.cluster.params,
        records: driver.cluster.records,
        trace,
        updates: driver.updates,
        batches_done: driver.done,
        virtual_time,
        trace_hash: sim.trace_hash(),
    })
}

/// One node per peer on a fully connected uniform network.
pub fn uniform_pipeline_topology(peers: usize, bandwidth: f64, latency: f64) -> (Topology, Vec<NodeId>) {
    let topo = Topology::uniform(peers as u32, 1e12, bandwidth, latency);
    let nodes = (0..peers as u32).map(NodeId).collect();
    (topo, nodes)
}

/// Endless batches drawn from `shard` of `data`.
pub fn sampler_source(data: Arc<Dataset>, shard: Vec<usize>, batch_size: usize, cluster_id: usize, seed: u64) -> Result<Box<dyn BatchSource>> {
    Ok(Box::new(SamplerSource { sampler: BatchSampler::new(shard, batch_size, cluster_id, seed)?, data }))
}
