//! Wall-clock pipeline on OS threads.
//!
//! Every peer runs one compute thread and one sender thread per direction.
//! Buffers and outboxes sit behind a per-peer mutex with a condition
//! variable; senders block until the receiving slot is empty. Timing is
//! nondeterministic except with one batch in flight.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{self, ForwardContext, GradAccumulator, Matrix, Model, SubmodelSpec};

use super::{PipelineConfig, StalenessRecord};

type Item = (u64, Matrix);

#[derive(Default)]
struct Boxes {
    fwd: Option<Item>,
    bwd: Option<Item>,
    fwd_out: Option<Item>,
    bwd_out: Option<Item>,
    stop: bool,
}

#[derive(Default)]
struct Peer {
    boxes: Mutex<Boxes>,
    cv: Condvar,
}

impl Peer {
    fn lock(&self) -> MutexGuard<'_, Boxes> {
        self.boxes.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait<'a>(&self, g: MutexGuard<'a, Boxes>) -> MutexGuard<'a, Boxes> {
        self.cv.wait(g).unwrap_or_else(|e| e.into_inner())
    }
}

struct Shared {
    peers: Vec<Peer>,
    labels: Mutex<BTreeMap<u64, Matrix>>,
    inflight: Mutex<(usize, u64)>,
    inflight_cv: Condvar,
    target: u64,
    stopped: AtomicBool,
}

impl Shared {
    fn stop_all(&self) {
        self.stopped.store(true, Ordering::SeqCst);
        let _guard = self.inflight.lock().unwrap_or_else(|e| e.into_inner());
        drop(_guard);
        for p in &self.peers {
            p.lock().stop = true;
            p.cv.notify_all();
        }
        self.inflight_cv.notify_all();
    }
}

#[derive(Debug, Clone)]
pub struct RealtimeRun {
    pub params: Vec<f64>,
    pub records: Vec<StalenessRecord>,
    pub updates: u64,
}

enum Job {
    Forward(Item),
    Backward(Item),
}

struct Worker<'a> {
    p: usize,
    last: usize,
    model: &'a Model,
    sub: &'a SubmodelSpec,
    config: PipelineConfig,
    shared: &'a Shared,
    params: Vec<f64>,
    saved: BTreeMap<u64, (ForwardContext, Vec<f64>, u64)>,
    accum: GradAccumulator,
    updates: u64,
    records: Vec<StalenessRecord>,
    started: std::time::Instant,
}

impl Worker<'_> {
    fn next_job(&self) -> Option<Job> {
        let me = &self.shared.peers[self.p];
        let mut g = me.lock();
        loop {
            if g.stop {
                return None;
            }
            if g.bwd.is_some() && (self.p == 0 || g.bwd_out.is_none()) {
                let job = Job::Backward(g.bwd.take().expect("checked"));
                me.cv.notify_all();
                return Some(job);
            }
            let room = if self.p == self.last { g.bwd.is_none() } else { g.fwd_out.is_none() };
            if g.fwd.is_some() && room {
                let job = Job::Forward(g.fwd.take().expect("checked"));
                me.cv.notify_all();
                if self.p == 0 {
                    self.shared.inflight_cv.notify_all();
                }
                return Some(job);
            }
            g = me.wait(g);
        }
    }

    fn run(&mut self) -> Result<()> {
        while let Some(job) = self.next_job() {
            match job {
                Job::Forward((id, x)) => self.forward(id, x)?,
                Job::Backward((id, g)) => self.backward(id, g)?,
            }
        }
        Ok(())
    }

    fn forward(&mut self, id: u64, x: Matrix) -> Result<()> {
        let weights = self.params.clone();
        let (out, ctx) = model::forward(self.model, self.sub, &weights, &x)?;
        self.saved.insert(id, (ctx, weights, self.updates));
        let me = &self.shared.peers[self.p];
        if self.p == self.last {
            let targets = self
                .shared
                .labels
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .remove(&id)
                .ok_or_else(|| Error::Protocol(format!("no labels for batch {id}")))?;
            let (_, grad) = self.model.loss().evaluate(&out, &targets)?;
            me.lock().bwd = Some((id, grad));
        } else {
            me.lock().fwd_out = Some((id, out));
        }
        me.cv.notify_all();
        Ok(())
    }

    fn backward(&mut self, id: u64, upstream: Matrix) -> Result<()> {
        let (ctx, weights, version) =
            self.saved.remove(&id).ok_or_else(|| Error::Protocol(format!("peer {}: backward for unknown batch {id}", self.p)))?;
        let tau = self.updates - version;
        if self.config.enforce_t && tau > self.config.t_bound {
            return Err(Error::Staleness { cluster: 0, peer: self.p, batch_id: id, tau, bound: self.config.t_bound });
        }
        let (grads, dx) = model::backward(self.model, self.sub, &weights, &ctx, &upstream)?;
        if let Some(step) = self.accum.push(grads) {
            model::apply_update(&mut self.params, &step, self.config.eta)?;
            self.updates += 1;
        }
        self.records.push(StalenessRecord {
            cluster: 0,
            batch_id: id,
            peer: self.p,
            tau,
            update_index: self.updates,
            virtual_time: self.started.elapsed().as_secs_f64(),
        });
        if self.p > 0 {
            let me = &self.shared.peers[self.p];
            me.lock().bwd_out = Some((id, dx));
            me.cv.notify_all();
        } else {
            let mut g = self.shared.inflight.lock().unwrap_or_else(|e| e.into_inner());
            g.0 -= 1;
            g.1 += 1;
            let finished = g.1 >= self.shared.target;
            drop(g);
            self.shared.inflight_cv.notify_all();
            if finished {
                self.shared.stop_all();
            }
        }
        Ok(())
    }
}

/// Moves items from `from`'s outbox into `to`'s slot, blocking on both ends.
fn sender(shared: &Shared, from: usize, to: usize, forward: bool) {
    let (src, dst) = (&shared.peers[from], &shared.peers[to]);
    loop {
        let item = {
            let mut g = src.lock();
            loop {
                if g.stop {
                    return;
                }
                let out = if forward { g.fwd_out.take() } else { g.bwd_out.take() };
                if let Some(item) = out {
                    break item;
                }
                g = src.wait(g);
            }
        };
        src.cv.notify_all();
        let mut g = dst.lock();
        loop {
            if g.stop {
                return;
            }
            let slot = if forward { &mut g.fwd } else { &mut g.bwd };
            if slot.is_none() {
                *slot = Some(item);
                break;
            }
            g = dst.wait(g);
        }
        drop(g);
        dst.cv.notify_all();
    }
}

/// Runs `batches` through the pipeline on real threads.
pub fn run_realtime(
    model: Arc<Model>,
    subs: &[SubmodelSpec],
    params: Vec<f64>,
    batches: Vec<Batch>,
    config: PipelineConfig,
) -> Result<RealtimeRun> {
    config.validate()?;
    if subs.is_empty() {
        return Err(Error::Config("pipeline needs at least one peer".into()));
    }
    if params.len() != model.param_count() {
        return Err(Error::Shape(format!("{} parameters for a model of {}", params.len(), model.param_count())));
    }
    let n = subs.len();
    let shared = Shared {
        peers: (0..n).map(|_| Peer::default()).collect(),
        labels: Mutex::new(BTreeMap::new()),
        inflight: Mutex::new((0, 0)),
        inflight_cv: Condvar::new(),
        target: batches.len() as u64,
        stopped: AtomicBool::new(false),
    };
    if batches.is_empty() {
        return Ok(RealtimeRun { params, records: Vec::new(), updates: 0 });
    }
    let cap = config.effective_inflight();
    let started = std::time::Instant::now();
    let results: Vec<Result<(Vec<f64>, Vec<StalenessRecord>, u64)>> = thread::scope(|s| {
        let shared = &shared;
        for p in 0..n {
            if p + 1 < n {
                s.spawn(move || sender(shared, p, p + 1, true));
            }
            if p > 0 {
                s.spawn(move || sender(shared, p, p - 1, false));
            }
        }
        s.spawn(move || {
            for b in batches {
                let mut g = shared.inflight.lock().unwrap_or_else(|e| e.into_inner());
                while g.0 >= cap && !shared.stopped.load(Ordering::SeqCst) {
                    g = shared.inflight_cv.wait(g).unwrap_or_else(|e| e.into_inner());
                }
                if shared.stopped.load(Ordering::SeqCst) {
                    return;
                }
                g.0 += 1;
                drop(g);
                shared.labels.lock().unwrap_or_else(|e| e.into_inner()).insert(b.batch_id, b.targets);
                let first = &shared.peers[0];
                let mut slot = first.lock();
                while slot.fwd.is_some() && !slot.stop {
                    slot = first.wait(slot);
                }
                if slot.stop {
                    return;
                }
                slot.fwd = Some((b.batch_id, b.inputs));
                drop(slot);
                first.cv.notify_all();
            }
        });
        let handles: Vec<_> = subs
            .iter()
            .enumerate()
            .map(|(p, sub)| {
                let model = &*model;
                let local = params[sub.params.clone()].to_vec();
                s.spawn(move || {
                    let mut w = Worker {
                        p,
                        last: n - 1,
                        model,
                        sub,
                        config,
                        shared,
                        params: local,
                        saved: BTreeMap::new(),
                        accum: GradAccumulator::new(config.n_accum, sub.param_count()),
                        updates: 0,
                        records: Vec::new(),
                        started,
                    };
                    let r = w.run();
                    if r.is_err() {
                        shared.stop_all();
                    }
                    r.map(|_| (w.params, w.records, w.updates))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = params;
    let mut records = Vec::new();
    let mut updates = 0;
    for (sub, r) in subs.iter().zip(results) {
        let (local, recs, u) = r?;
        out[sub.params.clone()].copy_from_slice(&local);
        records.extend(recs);
        updates += u;
    }
    records.sort_by_key(|r| (r.batch_id, std::cmp::Reverse(r.peer)));
    Ok(RealtimeRun { params: out, records, updates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, partition_model, Activation, Loss, ModelSpec};
    use crate::oracle;

    fn batches(n: usize) -> Vec<Batch> {
        (0..n)
            .map(|b| Batch {
                inputs: Matrix::from_vec(2, 3, (0..6).map(|i| ((b * 7 + i) as f64 * 0.3).sin()).collect()).unwrap(),
                targets: Matrix::from_vec(2, 2, (0..4).map(|i| ((b + i) as f64 * 0.2).cos()).collect()).unwrap(),
                batch_id: b as u64,
                cluster_id: 0,
            })
            .collect()
    }

    #[test]
    fn one_in_flight_matches_sgd() {
        let spec = ModelSpec::new(vec![3, 5, 4, 2], Activation::Tanh, Loss::Mse);
        let (m, p) = build_model(&spec, 3).unwrap();
        let subs = partition_model(&m, &[1e12; 3], 2).unwrap();
        let mut cfg = PipelineConfig::new(0.1, 3);
        cfg.max_inflight = 1;
        let bs = batches(30);
        let run = run_realtime(Arc::new(m), &subs, p.values().to_vec(), bs.clone(), cfg).unwrap();
        let traj = oracle::sgd_reference(&spec, p.values(), &bs, 0.1, 1);
        assert_eq!(run.params, *traj.last().unwrap());
        assert_eq!(run.updates, 90);
        assert!(run.records.iter().all(|r| r.tau == 0));
    }

    #[test]
    fn saturated_run_respects_inflight_bound() {
        let spec = ModelSpec::new(vec![3, 5, 4, 4, 2], Activation::Relu, Loss::Mse);
        let (m, p) = build_model(&spec, 4).unwrap();
        let subs = partition_model(&m, &[1e12; 4], 2).unwrap();
        let cfg = PipelineConfig::new(0.01, 4);
        let run = run_realtime(Arc::new(m), &subs, p.values().to_vec(), batches(200), cfg).unwrap();
        assert_eq!(run.records.len(), 800);
        assert!(run.records.iter().all(|r| r.tau <= 3));
        assert!(run.records.iter().filter(|r| r.peer == 3).all(|r| r.tau == 0));
    }
}
