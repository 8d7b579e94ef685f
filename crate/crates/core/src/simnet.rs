//! Deterministic discrete-event network.
//!
//! A single event loop owns the clock. Peers interact only by sending
//! [`Message`]s, which arrive after the link latency plus serialization time,
//! or by scheduling timers for their own compute. Links serialize messages in
//! send order, so per-link delivery is FIFO.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub src: NodeId,
    pub dst: NodeId,
    /// Seconds.
    pub latency: f64,
    /// Bytes per second.
    pub bandwidth: f64,
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.latency >= 0.0) || !self.latency.is_finite() {
            return Err(Error::Topology(format!("link {}->{} latency {} < 0", self.src, self.dst, self.latency)));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::Topology(format!(
                "link {}->{} bandwidth {} must be > 0",
                self.src, self.dst, self.bandwidth
            )));
        }
        Ok(())
    }

    pub fn transfer_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub ram_bytes: f64,
    #[serde(rename = "bandwidth_Bps")]
    pub bandwidth_bps: f64,
    #[serde(default = "default_speed")]
    pub speed_factor: f64,
}

fn default_speed() -> f64 {
    1.0
}

/// Node inventory plus optional per-link overrides. A link without an
/// override gets `min(sender bandwidth, receiver bandwidth)` and the default
/// latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub default_latency: f64,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

impl Topology {
    pub fn uniform(n: u32, ram_bytes: f64, bandwidth_bps: f64, latency: f64) -> Self {
        Self {
            default_latency: latency,
            nodes: (0..n)
                .map(|i| NodeSpec { id: NodeId(i), ram_bytes, bandwidth_bps, speed_factor: 1.0 })
                .collect(),
            links: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.default_latency >= 0.0) {
            return Err(Error::Topology(format!("default latency {} < 0", self.default_latency)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(Error::Topology(format!("duplicate node {}", n.id)));
            }
            if !(n.ram_bytes > 0.0) || !(n.bandwidth_bps > 0.0) || !(n.speed_factor > 0.0) {
                return Err(Error::Topology(format!("node {} needs positive ram, bandwidth and speed", n.id)));
            }
        }
        for l in &self.links {
            l.validate()?;
            if !seen.contains(&l.src) || !seen.contains(&l.dst) {
                return Err(Error::Topology(format!("link {}->{} names an unknown node", l.src, l.dst)));
            }
        }
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn link(&self, src: NodeId, dst: NodeId) -> Result<LinkSpec> {
        if let Some(l) = self.links.iter().find(|l| l.src == src && l.dst == dst) {
            return Ok(*l);
        }
        let (a, b) = match (self.node(src), self.node(dst)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Topology(format!("no link {src}->{dst}"))),
        };
        Ok(LinkSpec { src, dst, latency: self.default_latency, bandwidth: a.bandwidth_bps.min(b.bandwidth_bps) })
    }

    pub fn speed_factor(&self, id: NodeId) -> f64 {
        self.node(id).map_or(1.0, |n| n.speed_factor)
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let topo: Topology = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    Activation,
    Gradient,
    RingChunk,
    Control,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::Activation => 0,
            MessageKind::Gradient => 1,
            MessageKind::RingChunk => 2,
            MessageKind::Control => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => MessageKind::Activation,
            1 => MessageKind::Gradient,
            2 => MessageKind::RingChunk,
            3 => MessageKind::Control,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Activation => "activation",
            MessageKind::Gradient => "gradient",
            MessageKind::RingChunk => "ring_chunk",
            MessageKind::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: NodeId,
    pub receiver: NodeId,
    /// Batch id for pipeline traffic, round for ring chunks.
    pub step_tag: u64,
    pub staleness_stamp: u64,
    pub ring_id: u32,
    pub offset: u64,
    pub payload: Vec<f64>,
}

impl Message {
    pub fn new(kind: MessageKind, sender: NodeId, receiver: NodeId, step_tag: u64, payload: Vec<f64>) -> Self {
        Self { kind, sender, receiver, step_tag, staleness_stamp: 0, ring_id: 0, offset: 0, payload }
    }

    pub fn control(sender: NodeId, receiver: NodeId, step_tag: u64) -> Self {
        Self::new(MessageKind::Control, sender, receiver, step_tag, Vec::new())
    }

    pub fn payload_bytes(&self) -> u64 {
        8 * self.payload.len() as u64
    }
}

struct Entry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Events ordered by `(virtual time, insertion sequence)`.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    now: f64,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self { heap: BinaryHeap::new(), now: 0.0, next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueues at absolute time `time`; times in the past are clamped to now.
    pub fn push(&mut self, time: f64, event: E) {
        let time = if time < self.now { self.now } else { time };
        self.heap.push(Entry { time, seq: self.next_seq, event });
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        let e = self.heap.pop()?;
        self.now = e.time;
        Some((e.time, e.event))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event<T> {
    Deliver(Message),
    Timer(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub send_time: f64,
    pub time: f64,
    pub kind: MessageKind,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub step_tag: u64,
    pub ring_id: u32,
    pub bytes: u64,
}

/// Something driven by the event loop.
pub trait Process<T> {
    fn handle(&mut self, sim: &mut Simulator<T>, event: Event<T>) -> Result<()>;

    fn is_done(&self) -> bool;

    /// Describes who is waiting on what, for stall diagnostics.
    fn blocked_report(&self) -> String {
        String::from("no diagnostics")
    }
}

struct InFlight {
    send_time: f64,
    msg: Message,
}

pub struct Simulator<T> {
    queue: EventQueue<SimEvent<T>>,
    topology: Topology,
    link_free_at: BTreeMap<(NodeId, NodeId), f64>,
    trace: Vec<TraceRecord>,
    keep_trace: bool,
    hasher: Sha256,
    events_processed: u64,
}

enum SimEvent<T> {
    Deliver(InFlight),
    Timer(T),
}

impl<T> Simulator<T> {
    pub fn new(topology: Topology) -> Result<Self> {
        topology.validate()?;
        Ok(Self {
            queue: EventQueue::new(),
            topology,
            link_free_at: BTreeMap::new(),
            trace: Vec::new(),
            keep_trace: true,
            hasher: Sha256::new(),
            events_processed: 0,
        })
    }

    /// Stops retaining trace records; the running trace hash is still kept.
    pub fn without_trace(mut self) -> Self {
        self.keep_trace = false;
        self
    }

    pub fn now(&self) -> f64 {
        self.queue.now()
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    /// Schedules delivery of `msg` and returns its delivery time. A link
    /// carries one message at a time, so a busy link delays transmission.
    pub fn send(&mut self, msg: Message) -> Result<f64> {
        let link = self.topology.link(msg.sender, msg.receiver)?;
        let now = self.now();
        let free = self.link_free_at.entry((msg.sender, msg.receiver)).or_insert(0.0);
        let start = now.max(*free);
        let tx_done = start + link.transfer_time(msg.payload_bytes());
        *free = tx_done;
        let delivery = tx_done + link.latency;
        self.queue.push(delivery, SimEvent::Deliver(InFlight { send_time: now, msg }));
        Ok(delivery)
    }

    pub fn schedule(&mut self, delay: f64, timer: T) {
        let at = self.now() + delay.max(0.0);
        self.queue.push(at, SimEvent::Timer(timer));
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        std::mem::take(&mut self.trace)
    }

    /// Hash of every delivery so far: `(time, kind, sender, receiver, step_tag)`.
    pub fn trace_hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    /// Processes events until `process.is_done()`. Returns the clock at stop.
    pub fn run_until<P: Process<T>>(&mut self, process: &mut P, budget: u64) -> Result<f64> {
        let mut used = 0u64;
        while !process.is_done() {
            let Some((time, event)) = self.queue.pop() else {
                return Err(Error::Protocol(format!(
                    "event queue drained at t={time:.6}s before completion; {}",
                    process.blocked_report(),
                    time = self.now()
                )));
            };
            if used >= budget {
                return Err(Error::Livelock { budget, time, blocked: process.blocked_report() });
            }
            used += 1;
            self.events_processed += 1;
            let event = match event {
                SimEvent::Timer(t) => Event::Timer(t),
                SimEvent::Deliver(InFlight { send_time, msg }) => {
                    self.record(send_time, time, &msg);
                    Event::Deliver(msg)
                }
            };
            process.handle(self, event)?;
        }
        Ok(self.now())
    }

    /// Processes every queued event regardless of completion state.
    pub fn drain<P: Process<T>>(&mut self, process: &mut P, budget: u64) -> Result<f64> {
        let mut used = 0u64;
        while let Some((time, event)) = self.queue.pop() {
            if used >= budget {
                return Err(Error::Livelock { budget, time, blocked: process.blocked_report() });
            }
            used += 1;
            self.events_processed += 1;
            let event = match event {
                SimEvent::Timer(t) => Event::Timer(t),
                SimEvent::Deliver(InFlight { send_time, msg }) => {
                    self.record(send_time, time, &msg);
                    Event::Deliver(msg)
                }
            };
            process.handle(self, event)?;
        }
        Ok(self.now())
    }

    fn record(&mut self, send_time: f64, time: f64, msg: &Message) {
        self.hasher.update(time.to_bits().to_le_bytes());
        self.hasher.update([msg.kind.code()]);
        self.hasher.update(msg.sender.0.to_le_bytes());
        self.hasher.update(msg.receiver.0.to_le_bytes());
        self.hasher.update(msg.step_tag.to_le_bytes());
        if self.keep_trace {
            self.trace.push(TraceRecord {
                send_time,
                time,
                kind: msg.kind,
                sender: msg.sender,
                receiver: msg.receiver,
                step_tag: msg.step_tag,
                ring_id: msg.ring_id,
                bytes: msg.payload_bytes(),
            });
        }
    }
}

/// Writes `time,kind,sender,receiver,step_tag,bytes`.
pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "kind", "sender", "receiver", "step_tag", "bytes"])
        .map_err(|e| Error::parse("trace csv", e))?;
    for r in trace {
        w.write_record([
            format!("{:?}", r.time),
            r.kind.name().to_string(),
            r.sender.0.to_string(),
            r.receiver.0.to_string(),
            r.step_tag.to_string(),
            r.bytes.to_string(),
        ])
        .map_err(|e| Error::parse("trace csv", e))?;
    }
    w.flush().map_err(|e| Error::io("trace csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Sink {
        expected: usize,
        got: Vec<(f64, Message)>,
        timers: Vec<(f64, u32)>,
    }

    impl Process<u32> for Sink {
        fn handle(&mut self, sim: &mut Simulator<u32>, event: Event<u32>) -> Result<()> {
            match event {
                Event::Deliver(m) => self.got.push((sim.now(), m)),
                Event::Timer(t) => self.timers.push((sim.now(), t)),
            }
            Ok(())
        }

        fn is_done(&self) -> bool {
            self.got.len() + self.timers.len() >= self.expected
        }
    }

    fn sink(expected: usize) -> Sink {
        Sink { expected, got: Vec::new(), timers: Vec::new() }
    }

    fn two_nodes(latency: f64, bandwidth: f64) -> Topology {
        let mut t = Topology::uniform(2, 1e9, bandwidth, latency);
        t.validate().unwrap();
        t.links.push(LinkSpec { src: NodeId(0), dst: NodeId(1), latency, bandwidth });
        t
    }

    #[test]
    fn degenerate_link_delivers_immediately() {
        let mut sim = Simulator::<u32>::new(two_nodes(0.0, 1e18)).unwrap();
        let at = sim.send(Message::new(MessageKind::Activation, NodeId(0), NodeId(1), 0, vec![1.0; 125])).unwrap();
        assert!(at.abs() < 1e-12);
    }

    #[test]
    fn delivery_is_latency_plus_serialization() {
        let mut sim = Simulator::<u32>::new(two_nodes(0.01, 1e5)).unwrap();
        let msg = Message::new(MessageKind::Activation, NodeId(0), NodeId(1), 3, vec![0.5; 125]);
        assert_eq!(msg.payload_bytes(), 1000);
        let at = sim.send(msg).unwrap();
        assert!((at - 0.02).abs() < 1e-15);
        let mut s = sink(1);
        let end = sim.run_until(&mut s, 10).unwrap();
        assert!((end - 0.02).abs() < 1e-15);
    }

    #[test]
    fn link_is_fifo() {
        let mut sim = Simulator::<u32>::new(two_nodes(0.001, 1e3)).unwrap();
        sim.send(Message::new(MessageKind::Gradient, NodeId(0), NodeId(1), 1, vec![0.0; 10])).unwrap();
        sim.schedule(1e-9, 0);
        let mut s = sink(1);
        sim.run_until(&mut s, 10).unwrap();
        sim.send(Message::new(MessageKind::Gradient, NodeId(0), NodeId(1), 2, vec![])).unwrap();
        let mut s = sink(2);
        sim.run_until(&mut s, 10).unwrap();
        let tags: Vec<u64> = s.got.iter().map(|(_, m)| m.step_tag).collect();
        assert_eq!(tags, vec![1, 2]);
    }

    #[test]
    fn missing_link_is_topology_error() {
        let mut sim = Simulator::<u32>::new(Topology::uniform(2, 1.0, 1.0, 0.0)).unwrap();
        let err = sim.send(Message::control(NodeId(0), NodeId(7), 0)).unwrap_err();
        assert!(matches!(err, Error::Topology(_)));
    }

    #[test]
    fn empty_run_returns_immediately() {
        let mut sim = Simulator::<u32>::new(Topology::uniform(1, 1.0, 1.0, 0.0)).unwrap();
        let mut s = sink(0);
        assert_eq!(sim.run_until(&mut s, 0).unwrap(), 0.0);
    }

    #[test]
    fn single_timer_advances_clock() {
        let mut sim = Simulator::<u32>::new(Topology::uniform(1, 1.0, 1.0, 0.0)).unwrap();
        sim.schedule(5.0, 9);
        let mut s = sink(1);
        assert_eq!(sim.run_until(&mut s, 5).unwrap(), 5.0);
        assert_eq!(s.timers, vec![(5.0, 9)]);
    }

    #[test]
    fn budget_exhaustion_is_livelock() {
        let mut sim = Simulator::<u32>::new(Topology::uniform(1, 1.0, 1.0, 0.0)).unwrap();
        for i in 0..5 {
            sim.schedule(i as f64, i);
        }
        let mut s = sink(100);
        assert!(matches!(sim.run_until(&mut s, 3), Err(Error::Livelock { budget: 3, .. })));
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.push(2.0, "c");
        q.push(1.0, "a");
        q.push(1.0, "b");
        let order: Vec<&str> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn topology_round_trips_through_toml() {
        let mut t = Topology::uniform(3, 2e9, 1.25e8, 0.002);
        t.nodes[1].speed_factor = 0.5;
        t.links.push(LinkSpec { src: NodeId(0), dst: NodeId(2), latency: 0.1, bandwidth: 1e6 });
        let back = Topology::from_toml_str(&t.to_toml_string(), "mem").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.link(NodeId(0), NodeId(2)).unwrap().bandwidth, 1e6);
        assert_eq!(back.link(NodeId(2), NodeId(0)).unwrap().bandwidth, 1.25e8);
    }

    #[test]
    fn unknown_topology_keys_rejected() {
        assert!(Topology::from_toml_str("colour = 1\nnodes = []", "mem").is_err());
    }
}
