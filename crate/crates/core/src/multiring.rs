//! Parallel multi-ring all-reduce across clusters.
//!
//! Each cluster splits the same global parameter space differently across
//! its peers. The union of all clusters' peer boundaries cuts that space into
//! segments, and each segment becomes one ring with exactly one member per
//! cluster: the peer that owns the segment there. A peer may therefore sit in
//! several rings.
//!
//! Within a ring of `C` members the segment is cut into `C` chunks (sizes
//! differ by at most one, larger chunks first). Member `j` receives in round
//! `r` the chunk `(j - 1 - r) mod C` from its predecessor. Rounds
//! `0..C-1` fold the incoming partial mean of `r + 1` values into the local
//! chunk as `m + (x - m) / (r + 2)` (reduce-scatter), so identical inputs come
//! back bit for bit; rounds `C-1..2(C-1)` overwrite (all-gather). A member forwards the chunk
//! it just received in the next round, so it sends exactly `2(C-1)` chunks.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParameterVector, SubmodelSpec};
use crate::simnet::{Event, LinkSpec, Message, MessageKind, NodeId, Process, Simulator, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RingMember {
    pub cluster: usize,
    pub peer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ring {
    pub ring_id: usize,
    pub start: usize,
    pub len: usize,
    /// One member per cluster, ascending cluster id.
    pub members: Vec<RingMember>,
}

impl Ring {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    /// Chunk ranges relative to `start`.
    pub fn chunks(&self) -> Vec<Range<usize>> {
        chunk_ranges(self.len, self.members.len())
    }
}

/// `len` split into `parts` contiguous pieces, remainder to the lowest
/// indices.
pub fn chunk_ranges(len: usize, parts: usize) -> Vec<Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let n = base + usize::from(i < extra);
        out.push(start..start + n);
        start += n;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingSchedule {
    pub rings: Vec<Ring>,
    pub total_len: usize,
    pub clusters: usize,
}

/// Parameter ranges owned by each peer of a cluster, in pipeline order.
pub type ClusterLayout = Vec<Range<usize>>;

pub fn layout_of(subs: &[SubmodelSpec]) -> ClusterLayout {
    subs.iter().map(|s| s.params.clone()).collect()
}

/// Builds rings from every cluster's submodel layout.
pub fn build_ring_schedule(layouts: &[Vec<SubmodelSpec>]) -> Result<RingSchedule> {
    let ranges: Vec<ClusterLayout> = layouts.iter().map(|l| layout_of(l)).collect();
    build_ring_schedule_from_ranges(&ranges)
}

pub fn build_ring_schedule_from_ranges(layouts: &[ClusterLayout]) -> Result<RingSchedule> {
    if layouts.is_empty() {
        return Err(Error::Layout("no clusters".into()));
    }
    let mut total = None;
    let mut cuts = BTreeSet::new();
    for (c, layout) in layouts.iter().enumerate() {
        let mut end = 0;
        for (p, r) in layout.iter().enumerate() {
            if r.start != end || r.is_empty() {
                return Err(Error::Layout(format!(
                    "cluster {c} peer {p} owns {r:?}, expected a non-empty range starting at {end}"
                )));
            }
            end = r.end;
            cuts.insert(r.start);
        }
        if layout.is_empty() {
            return Err(Error::Layout(format!("cluster {c} has no peers")));
        }
        match total {
            None => total = Some(end),
            Some(t) if t != end => {
                return Err(Error::Layout(format!("cluster {c} covers {end} parameters, cluster 0 covers {t}")));
            }
            _ => {}
        }
    }
    let total = total.expect("at least one cluster");
    cuts.insert(total);
    let cuts: Vec<usize> = cuts.into_iter().collect();
    let rings = cuts
        .windows(2)
        .enumerate()
        .map(|(ring_id, w)| Ring {
            ring_id,
            start: w[0],
            len: w[1] - w[0],
            members: layouts
                .iter()
                .enumerate()
                .map(|(cluster, layout)| RingMember {
                    cluster,
                    peer: layout.iter().position(|r| r.start <= w[0] && w[1] <= r.end).expect("segment inside a peer"),
                })
                .collect(),
        })
        .collect();
    Ok(RingSchedule { rings, total_len: total, clusters: layouts.len() })
}

impl RingSchedule {
    /// Checks every structural invariant against the layouts it was built from.
    pub fn validate(&self, layouts: &[ClusterLayout]) -> Result<()> {
        let mut next = 0;
        for (i, ring) in self.rings.iter().enumerate() {
            if ring.ring_id != i || ring.start != next || ring.len == 0 {
                return Err(Error::Layout(format!("ring {i} does not continue the tiling at {next}")));
            }
            next += ring.len;
            if ring.members.len() != self.clusters {
                return Err(Error::Layout(format!("ring {i} has {} members for {} clusters", ring.members.len(), self.clusters)));
            }
            for (c, m) in ring.members.iter().enumerate() {
                if m.cluster != c {
                    return Err(Error::Layout(format!("ring {i} member {c} is from cluster {}", m.cluster)));
                }
                let owned = layouts
                    .get(c)
                    .and_then(|l| l.get(m.peer))
                    .ok_or_else(|| Error::Layout(format!("ring {i} names missing peer ({c},{})", m.peer)))?;
                if !(owned.start <= ring.start && ring.start + ring.len <= owned.end) {
                    return Err(Error::Layout(format!("ring {i} range escapes peer ({c},{})", m.peer)));
                }
            }
        }
        if next != self.total_len {
            return Err(Error::Layout(format!("rings cover {next} of {} parameters", self.total_len)));
        }
        Ok(())
    }

    pub fn rounds_per_ring(&self) -> usize {
        2 * (self.clusters.saturating_sub(1))
    }

    /// One line per ring: `ring_id,start,len,members=[(cluster,peer)...]`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rings {
            let members: Vec<String> = r.members.iter().map(|m| format!("({},{})", m.cluster, m.peer)).collect();
            writeln!(out, "{},{},{},members=[{}]", r.ring_id, r.start, r.len, members.join(",")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rings = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::parse(format!("schedule line {}", lineno + 1), what);
            let (head, members) = line.split_once(",members=[").ok_or_else(|| bad("missing members list"))?;
            let members = members.strip_suffix(']').ok_or_else(|| bad("unterminated members list"))?;
            let fields: Vec<&str> = head.split(',').collect();
            if fields.len() != 3 {
                return Err(bad("expected ring_id,start,len"));
            }
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("bad integer"));
            let mut parsed = Vec::new();
            for m in members.split(")").map(|s| s.trim_start_matches(',').trim()).filter(|s| !s.is_empty()) {
                let inner = m.strip_prefix('(').ok_or_else(|| bad("member must look like (cluster,peer)"))?;
                let (c, p) = inner.split_once(',').ok_or_else(|| bad("member must look like (cluster,peer)"))?;
                parsed.push(RingMember { cluster: num(c)?, peer: num(p)? });
            }
            rings.push(Ring { ring_id: num(fields[0])?, start: num(fields[1])?, len: num(fields[2])?, members: parsed });
        }
        let clusters = rings.first().map_or(0, |r| r.members.len());
        let total_len = rings.iter().map(|r| r.len).sum();
        Ok(Self { rings, total_len, clusters })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    ReduceScatter,
    AllGather,
    Done,
}

#[derive(Debug, Clone)]
struct MemberState {
    node: NodeId,
    /// This member's copy of the ring's segment.
    acc: Vec<f64>,
    /// Next round this member expects to receive.
    round: usize,
}

/// State of one ring during a cycle.
#[derive(Debug, Clone)]
pub struct RingRoundState {
    pub ring_id: usize,
    start: usize,
    chunks: Vec<Range<usize>>,
    members: Vec<MemberState>,
}

impl RingRoundState {
    fn c(&self) -> usize {
        self.members.len()
    }

    fn total_rounds(&self) -> usize {
        2 * (self.c() - 1)
    }

    /// Lowest round any member is still waiting for.
    pub fn round(&self) -> usize {
        self.members.iter().map(|m| m.round).min().unwrap_or(0)
    }

    pub fn phase(&self) -> Phase {
        let r = self.round();
        if r >= self.total_rounds() {
            Phase::Done
        } else if r < self.c() - 1 {
            Phase::ReduceScatter
        } else {
            Phase::AllGather
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase() == Phase::Done
    }

    /// All members hold elementwise identical segments.
    pub fn agreed(&self) -> bool {
        self.members.windows(2).all(|w| w[0].acc == w[1].acc)
    }

    fn chunk_for(&self, member: usize, round: usize) -> usize {
        let c = self.c();
        (member + c * (round + 1) - 1 - round) % c
    }

    fn message(&self, from: usize, round: usize, chunk: usize) -> Message {
        let to = (from + 1) % self.c();
        let range = self.chunks[chunk].clone();
        let mut msg = Message::new(
            MessageKind::RingChunk,
            self.members[from].node,
            self.members[to].node,
            round as u64,
            self.members[from].acc[range.clone()].to_vec(),
        );
        msg.ring_id = self.ring_id as u32;
        msg.offset = (self.start + range.start) as u64;
        msg
    }
}

/// Every ring of one averaging cycle, driven by chunk deliveries.
#[derive(Debug, Clone)]
pub struct MultiRingAllReduce {
    rings: Vec<RingRoundState>,
    schedule: RingSchedule,
}

impl MultiRingAllReduce {
    /// `endpoints[cluster][peer]` is the node hosting that peer.
    pub fn new(schedule: &RingSchedule, endpoints: &[Vec<NodeId>], cluster_params: &[&[f64]]) -> Result<Self> {
        if schedule.clusters < 2 {
            return Err(Error::Layout(format!("all-reduce needs at least 2 clusters, got {}", schedule.clusters)));
        }
        if cluster_params.len() != schedule.clusters {
            return Err(Error::Layout(format!(
                "{} parameter vectors for {} clusters",
                cluster_params.len(),
                schedule.clusters
            )));
        }
        for (c, p) in cluster_params.iter().enumerate() {
            if p.len() != schedule.total_len {
                return Err(Error::Layout(format!(
                    "cluster {c} holds {} parameters, schedule covers {}",
                    p.len(),
                    schedule.total_len
                )));
            }
        }
        let mut rings = Vec::with_capacity(schedule.rings.len());
        for ring in &schedule.rings {
            let members = ring
                .members
                .iter()
                .map(|m| {
                    let node = *endpoints.get(m.cluster).and_then(|e| e.get(m.peer)).ok_or_else(|| {
                        Error::Layout(format!("no endpoint for cluster {} peer {}", m.cluster, m.peer))
                    })?;
                    Ok(MemberState { node, acc: cluster_params[m.cluster][ring.range()].to_vec(), round: 0 })
                })
                .collect::<Result<Vec<_>>>()?;
            rings.push(RingRoundState { ring_id: ring.ring_id, start: ring.start, chunks: ring.chunks(), members });
        }
        Ok(Self { rings, schedule: schedule.clone() })
    }

    pub fn rings(&self) -> &[RingRoundState] {
        &self.rings
    }

    /// Sends every member's round-0 chunk.
    pub fn start<T>(&mut self, sim: &mut Simulator<T>) -> Result<()> {
        for ring in &self.rings {
            for j in 0..ring.c() {
                let chunk = ring.chunk_for((j + 1) % ring.c(), 0);
                sim.send(ring.message(j, 0, chunk))?;
            }
        }
        Ok(())
    }

    pub fn on_chunk<T>(&mut self, sim: &mut Simulator<T>, msg: Message) -> Result<()> {
        let ring = self
            .rings
            .get_mut(msg.ring_id as usize)
            .ok_or_else(|| Error::Protocol(format!("chunk for unknown ring {}", msg.ring_id)))?;
        let c = ring.c();
        let j = ring
            .members
            .iter()
            .position(|m| m.node == msg.receiver)
            .ok_or_else(|| Error::Protocol(format!("{} is not a member of ring {}", msg.receiver, ring.ring_id)))?;
        let round = ring.members[j].round;
        if msg.step_tag != round as u64 || round >= ring.total_rounds() {
            return Err(Error::Protocol(format!(
                "ring {} member {j} expected round {round}, got {}",
                ring.ring_id, msg.step_tag
            )));
        }
        let k = ring.chunk_for(j, round);
        let range = ring.chunks[k].clone();
        if msg.payload.len() != range.len() || msg.offset != (ring.start + range.start) as u64 {
            return Err(Error::Protocol(format!(
                "ring {} round {round}: chunk at offset {} with {} values does not match chunk {k}",
                ring.ring_id,
                msg.offset,
                msg.payload.len()
            )));
        }
        let acc = &mut ring.members[j].acc[range];
        if round < c - 1 {
            let k = (round + 2) as f64;
            for (a, m) in acc.iter_mut().zip(&msg.payload) {
                *a = m + (*a - m) / k;
            }
        } else {
            acc.copy_from_slice(&msg.payload);
        }
        ring.members[j].round += 1;
        if round + 1 < ring.total_rounds() {
            let out = ring.message(j, round + 1, k);
            sim.send(out)?;
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.rings.iter().all(RingRoundState::is_done)
    }

    /// First `(ring, round, member)` still waiting for a chunk.
    pub fn first_stalled(&self) -> Option<(usize, usize, usize)> {
        self.rings.iter().find_map(|r| {
            r.members
                .iter()
                .enumerate()
                .find(|(_, m)| m.round < r.total_rounds())
                .map(|(j, m)| (r.ring_id, m.round, j))
        })
    }

    /// Writes the averaged segments back into each cluster's vector.
    pub fn write_back(&self, cluster_params: &mut [Vec<f64>]) -> Result<()> {
        if !self.is_done() {
            let (ring, round, member) = self.first_stalled().expect("unfinished ring");
            return Err(Error::Stall { ring, round, member });
        }
        for (ring, spec) in self.rings.iter().zip(&self.schedule.rings) {
            for (m, member) in ring.members.iter().zip(&spec.members) {
                cluster_params[member.cluster][spec.range()].copy_from_slice(&m.acc);
            }
        }
        Ok(())
    }
}

struct Driver<'a> {
    machine: &'a mut MultiRingAllReduce,
}

impl Process<()> for Driver<'_> {
    fn handle(&mut self, sim: &mut Simulator<()>, event: Event<()>) -> Result<()> {
        match event {
            Event::Deliver(msg) if msg.kind == MessageKind::RingChunk => self.machine.on_chunk(sim, msg),
            Event::Deliver(msg) => Err(Error::Protocol(format!("unexpected {:?} during all-reduce", msg.kind))),
            Event::Timer(()) => Ok(()),
        }
    }

    fn is_done(&self) -> bool {
        self.machine.is_done()
    }

    fn blocked_report(&self) -> String {
        match self.machine.first_stalled() {
            Some((r, round, m)) => format!("ring {r} member {m} waiting for round {round}"),
            None => "all rings complete".into(),
        }
    }
}

/// Node layout giving each `(cluster, peer)` its own node, numbered cluster by
/// cluster.
pub fn dense_endpoints(layouts: &[usize]) -> Vec<Vec<NodeId>> {
    let mut next = 0u32;
    layouts
        .iter()
        .map(|&peers| {
            (0..peers)
                .map(|_| {
                    next += 1;
                    NodeId(next - 1)
                })
                .collect()
        })
        .collect()
}

/// Peer count per cluster implied by a schedule.
pub fn peer_counts(schedule: &RingSchedule) -> Vec<usize> {
    let mut counts = vec![0; schedule.clusters];
    for ring in &schedule.rings {
        for m in &ring.members {
            counts[m.cluster] = counts[m.cluster].max(m.peer + 1);
        }
    }
    counts
}

/// Outcome of an all-reduce run on a simulator.
#[derive(Debug, Clone)]
pub struct AllReduceRun {
    pub params: Vec<Vec<f64>>,
    pub started: f64,
    pub finished: f64,
}

/// Runs one cycle on `sim`, starting at its current time.
pub fn run_allreduce_on(
    sim: &mut Simulator<()>,
    schedule: &RingSchedule,
    endpoints: &[Vec<NodeId>],
    cluster_params: &[&[f64]],
    budget: u64,
) -> Result<AllReduceRun> {
    let mut machine = MultiRingAllReduce::new(schedule, endpoints, cluster_params)?;
    let started = sim.now();
    machine.start(sim)?;
    let outcome = sim.run_until(&mut Driver { machine: &mut machine }, budget);
    if outcome.is_err() {
        if let Some((ring, round, member)) = machine.first_stalled() {
            return Err(Error::Stall { ring, round, member });
        }
        outcome?;
    }
    let mut params: Vec<Vec<f64>> = cluster_params.iter().map(|p| p.to_vec()).collect();
    machine.write_back(&mut params)?;
    Ok(AllReduceRun { params, started, finished: sim.now() })
}

/// Averages `cluster_params` over a uniform simulated network.
pub fn run_allreduce(schedule: &RingSchedule, cluster_params: &[ParameterVector]) -> Result<Vec<ParameterVector>> {
    let counts = peer_counts(schedule);
    let endpoints = dense_endpoints(&counts);
    let nodes: u32 = counts.iter().sum::<usize>() as u32;
    let mut sim = Simulator::new(Topology::uniform(nodes, 1e9, 1e9, 1e-4))?.without_trace();
    let views: Vec<&[f64]> = cluster_params.iter().map(|p| p.values()).collect();
    let budget = 16 * (schedule.rings.len() as u64 + 1) * (schedule.clusters as u64).pow(2);
    let run = run_allreduce_on(&mut sim, schedule, &endpoints, &views, budget)?;
    run.params
        .into_iter()
        .zip(cluster_params)
        .map(|(values, orig)| {
            let mut out = orig.clone();
            out.set_values(values)?;
            Ok(out)
        })
        .collect()
}

/// Links between consecutive ring members, for cost estimates.
pub trait LinkModel {
    fn link(&self, from: RingMember, to: RingMember) -> LinkSpec;
}

#[derive(Debug, Clone, Copy)]
pub struct UniformLinks {
    pub latency: f64,
    pub bandwidth: f64,
}

impl LinkModel for UniformLinks {
    fn link(&self, _from: RingMember, _to: RingMember) -> LinkSpec {
        LinkSpec { src: NodeId(0), dst: NodeId(0), latency: self.latency, bandwidth: self.bandwidth }
    }
}

pub struct TopologyLinks<'a> {
    pub topology: &'a Topology,
    pub endpoints: &'a [Vec<NodeId>],
}

impl LinkModel for TopologyLinks<'_> {
    fn link(&self, from: RingMember, to: RingMember) -> LinkSpec {
        let a = self.endpoints[from.cluster][from.peer];
        let b = self.endpoints[to.cluster][to.peer];
        self.topology.link(a, b).unwrap_or(LinkSpec { src: a, dst: b, latency: f64::INFINITY, bandwidth: f64::MIN_POSITIVE })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingCost {
    pub ring_id: usize,
    pub segment_bytes: u64,
    pub rounds: usize,
    /// Total bytes all members put on the wire in one cycle.
    pub total_bytes: u64,
    /// `2(C-1) * S / C`.
    pub bytes_per_member: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllReduceCost {
    pub rings: Vec<RingCost>,
    /// Slowest ring.
    pub critical_path: f64,
    /// One ring carrying every parameter.
    pub single_ring: RingCost,
}

impl AllReduceCost {
    pub fn speedup_over_single_ring(&self) -> f64 {
        self.single_ring.seconds / self.critical_path
    }
}

fn ring_cost(ring_id: usize, members: &[RingMember], len: usize, links: &dyn LinkModel) -> RingCost {
    let c = members.len();
    let segment_bytes = 8 * len as u64;
    let rounds = 2 * (c - 1);
    let total_bytes = rounds as u64 * segment_bytes;
    let chunk_bytes = segment_bytes as f64 / c as f64;
    let round_time = (0..c)
        .map(|i| {
            let l = links.link(members[i], members[(i + 1) % c]);
            l.latency + chunk_bytes / l.bandwidth
        })
        .fold(0.0, f64::max);
    RingCost {
        ring_id,
        segment_bytes,
        rounds,
        total_bytes,
        bytes_per_member: total_bytes as f64 / c as f64,
        seconds: rounds as f64 * round_time,
    }
}

/// Estimates one cycle: `2(C-1)` rounds per ring, each moving `S/C` bytes
/// per member over that ring's slowest hop.
pub fn allreduce_cost(schedule: &RingSchedule, links: &dyn LinkModel) -> AllReduceCost {
    let rings: Vec<RingCost> =
        schedule.rings.iter().map(|r| ring_cost(r.ring_id, &r.members, r.len, links)).collect();
    let critical_path = rings.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let baseline: Vec<RingMember> = (0..schedule.clusters).map(|cluster| RingMember { cluster, peer: 0 }).collect();
    let single_ring = ring_cost(0, &baseline, schedule.total_len, links);
    AllReduceCost { rings, critical_path, single_ring }
}

/// Decoded socket frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: MessageKind,
    pub ring_id: u32,
    pub round: u32,
    pub offset: u64,
    pub payload: Vec<f64>,
}

const FRAME_HEADER: usize = 1 + 4 + 4 + 8;

impl Frame {
    pub fn from_message(msg: &Message) -> Self {
        Frame {
            kind: msg.kind,
            ring_id: msg.ring_id,
            round: msg.step_tag as u32,
            offset: msg.offset,
            payload: msg.payload.clone(),
        }
    }

    /// Little-endian `u32 length | u8 kind | u32 ring_id | u32 round | u64 offset | f64[] payload`,
    /// where `length` counts the bytes after the length field.
    pub fn encode(&self) -> Vec<u8> {
        let body = FRAME_HEADER + 8 * self.payload.len();
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.ring_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one frame, returning it with the number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize)> {
        let err = |d: &str| Error::parse("frame", d);
        let len_bytes: [u8; 4] = buf.get(..4).ok_or_else(|| err("truncated length"))?.try_into().unwrap();
        let body = u32::from_le_bytes(len_bytes) as usize;
        if body < FRAME_HEADER || (body - FRAME_HEADER) % 8 != 0 {
            return Err(err("invalid body length"));
        }
        let b = buf.get(4..4 + body).ok_or_else(|| err("truncated body"))?;
        let kind = MessageKind::from_code(b[0]).ok_or_else(|| err("unknown kind"))?;
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let offset = u64::from_le_bytes(b[9..17].try_into().unwrap());
        let payload = b[FRAME_HEADER..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((Frame { kind, ring_id: u32_at(1), round: u32_at(5), offset, payload }, 4 + body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges(sizes: &[usize]) -> ClusterLayout {
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                start += s;
                start - s..start
            })
            .collect()
    }

    fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
        let n = vs.len() as f64;
        (0..vs[0].len()).map(|i| vs.iter().map(|v| v[i]).sum::<f64>() / n).collect()
    }

    #[test]
    fn homogeneous_layouts_pair_same_index_peers() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[5, 5]), ranges(&[5, 5])]).unwrap();
        assert_eq!(s.rings.len(), 2);
        for (i, r) in s.rings.iter().enumerate() {
            assert!(r.members.iter().all(|m| m.peer == i));
        }
    }

    #[test]
    fn coarse_peer_joins_several_rings() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[4, 4]), ranges(&[8])]).unwrap();
        assert_eq!(s.rings.len(), 2);
        assert!(s.rings.iter().all(|r| r.members[1] == RingMember { cluster: 1, peer: 0 }));
        assert_eq!(s.rings[0].members[0].peer, 0);
        assert_eq!(s.rings[1].members[0].peer, 1);
    }

    #[test]
    fn nested_three_two_one() {
        let layouts = [ranges(&[3, 3, 6]), ranges(&[6, 6]), ranges(&[12])];
        let s = build_ring_schedule_from_ranges(&layouts).unwrap();
        assert_eq!(s.rings.len(), 3);
        assert!(s.rings.iter().all(|r| r.members.len() == 3));
        s.validate(&layouts).unwrap();
    }

    #[test]
    fn mismatched_totals_rejected() {
        let err = build_ring_schedule_from_ranges(&[ranges(&[4, 4]), ranges(&[7])]).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn two_point_mean() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[2]), ranges(&[2])]).unwrap();
        let out = run_allreduce(&s, &[ParameterVector::flat(vec![2.0, 4.0]), ParameterVector::flat(vec![4.0, 8.0])]).unwrap();
        assert_eq!(out[0].values(), &[3.0, 6.0]);
        assert_eq!(out[1].values(), &[3.0, 6.0]);
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let layouts = [ranges(&[3, 4]), ranges(&[7]), ranges(&[1, 6])];
        let s = build_ring_schedule_from_ranges(&layouts).unwrap();
        let v: Vec<f64> = (0..7).map(|i| 0.1 * i as f64 - 0.3).collect();
        let inputs = vec![ParameterVector::flat(v.clone()); 3];
        let out = run_allreduce(&s, &inputs).unwrap();
        for o in out {
            assert_eq!(o.values(), &v[..]);
        }
    }

    #[test]
    fn four_clusters_match_direct_mean() {
        let layouts = [ranges(&[16, 48]), ranges(&[64]), ranges(&[16, 16, 32]), ranges(&[8, 8, 48])];
        let s = build_ring_schedule_from_ranges(&layouts).unwrap();
        let vs: Vec<Vec<f64>> = (0..4).map(|c| (0..64).map(|i| ((c * 64 + i) as f64 * 0.37).sin()).collect()).collect();
        let out = run_allreduce(&s, &vs.iter().cloned().map(ParameterVector::flat).collect::<Vec<_>>()).unwrap();
        let m = mean(&vs);
        for o in &out {
            for (a, b) in o.values().iter().zip(&m) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn each_ring_runs_two_c_minus_one_rounds() {
        let layouts = [ranges(&[2, 3]), ranges(&[5]), ranges(&[1, 4])];
        let s = build_ring_schedule_from_ranges(&layouts).unwrap();
        let endpoints = dense_endpoints(&peer_counts(&s));
        let mut sim = Simulator::new(Topology::uniform(5, 1.0, 1e6, 0.001)).unwrap();
        let vs = vec![vec![1.0; 5], vec![2.0; 5], vec![6.0; 5]];
        let views: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        run_allreduce_on(&mut sim, &s, &endpoints, &views, 10_000).unwrap();
        for ring in &s.rings {
            let rounds: BTreeSet<u64> =
                sim.trace().iter().filter(|t| t.ring_id as usize == ring.ring_id).map(|t| t.step_tag).collect();
            assert_eq!(rounds.len(), 4);
            let msgs = sim.trace().iter().filter(|t| t.ring_id as usize == ring.ring_id).count();
            assert_eq!(msgs, 4 * 3);
        }
    }

    #[test]
    fn single_cluster_is_rejected() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[3])]).unwrap();
        assert!(run_allreduce(&s, &[ParameterVector::flat(vec![0.0; 3])]).is_err());
    }

    #[test]
    fn wrong_vector_length_is_layout_error() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[3]), ranges(&[3])]).unwrap();
        let err = run_allreduce(&s, &[ParameterVector::flat(vec![0.0; 3]), ParameterVector::flat(vec![0.0; 4])]).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
    }

    #[test]
    fn stalled_ring_is_named() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[3]), ranges(&[3]), ranges(&[3])]).unwrap();
        let endpoints = dense_endpoints(&[1, 1, 1]);
        let mut sim = Simulator::new(Topology::uniform(3, 1.0, 1e6, 0.001)).unwrap();
        let vs = vec![vec![1.0; 3]; 3];
        let views: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let err = run_allreduce_on(&mut sim, &s, &endpoints, &views, 4).unwrap_err();
        assert!(matches!(err, Error::Stall { ring: 0, .. }), "{err:?}");
    }

    #[test]
    fn cost_rounds_and_bytes() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[30]), ranges(&[30]), ranges(&[30])]).unwrap();
        let cost = allreduce_cost(&s, &UniformLinks { latency: 0.0, bandwidth: 1e3 });
        assert_eq!(cost.rings[0].rounds, 4);
        assert_eq!(cost.rings[0].bytes_per_member, 2.0 * 2.0 * 240.0 / 3.0);
    }

    #[test]
    fn equal_rings_halve_the_critical_path() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[10, 10]), ranges(&[10, 10])]).unwrap();
        let cost = allreduce_cost(&s, &UniformLinks { latency: 0.0, bandwidth: 1e4 });
        assert_eq!(cost.critical_path * 2.0, cost.single_ring.seconds);
    }

    #[test]
    fn schedule_text_round_trips() {
        let s = build_ring_schedule_from_ranges(&[ranges(&[3, 3, 6]), ranges(&[6, 6]), ranges(&[12])]).unwrap();
        let text = s.to_text();
        assert!(text.starts_with("0,0,3,members=[(0,0),(1,0),(2,0)]"));
        assert_eq!(RingSchedule::from_text(&text).unwrap(), s);
    }

    #[test]
    fn frame_layout_is_exact() {
        let f = Frame { kind: MessageKind::RingChunk, ring_id: 2, round: 3, offset: 40, payload: vec![1.5] };
        let bytes = f.encode();
        assert_eq!(&bytes[..4], &(17u32 + 8).to_le_bytes());
        assert_eq!(bytes[4], 2);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &3u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &40u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1.5f64.to_le_bytes());
        assert_eq!(Frame::decode(&bytes).unwrap(), (f, 29));
        assert!(Frame::decode(&bytes[..20]).is_err());
    }

    #[test]
    fn chunks_spread_remainder_low() {
        assert_eq!(chunk_ranges(7, 3), vec![0..3, 3..5, 5..7]);
        assert_eq!(chunk_ranges(2, 3), vec![0..1, 1..2, 2..2]);
    }
}
