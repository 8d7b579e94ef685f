//! Brute-force reference implementations.
//!
//! Nothing here calls into the code paths it is used to check; only type
//! definitions are shared. The dense-layer loops follow the arithmetic order
//! documented in [`crate::model`] so trajectories can be compared bit for bit.

use serde::Serialize;

use crate::clusterform::{Assignment, Fitness, ModelFootprint, NodePool};
use crate::data::Batch;
use crate::model::{Activation, Loss, Matrix, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: Vec<String>,
}

impl OracleReport {
    /// Compares `actual` against `expected`, passing when the relative error
    /// `|a - e| / max(1, |e|)` stays within `tolerance`.
    pub fn compare(name: &str, actual: &[f64], expected: &[f64], tolerance: f64) -> Self {
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        let mut details = Vec::new();
        if actual.len() != expected.len() {
            details.push(format!("length {} vs {}", actual.len(), expected.len()));
            max_abs = f64::INFINITY;
            max_rel = f64::INFINITY;
        }
        for (a, e) in actual.iter().zip(expected) {
            let abs = (a - e).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / e.abs().max(1.0));
        }
        Self {
            name: name.to_string(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            tolerance,
            pass: max_rel <= tolerance,
            details,
        }
    }

    pub fn boolean(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            tolerance: 0.0,
            pass,
            details: vec![detail.into()],
        }
    }
}

struct DenseLayer {
    fan_in: usize,
    fan_out: usize,
    act: Activation,
    offset: usize,
}

fn dense_layers(spec: &ModelSpec) -> Vec<DenseLayer> {
    let mut offset = 0;
    let n = spec.arch.len() - 1;
    (0..n)
        .map(|i| {
            let l = DenseLayer {
                fan_in: spec.arch[i],
                fan_out: spec.arch[i + 1],
                act: if i + 1 == n { Activation::Identity } else { spec.hidden },
                offset,
            };
            offset += l.fan_in * l.fan_out + l.fan_out;
            l
        })
        .collect()
}

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Identity => z,
        Activation::Tanh => z.tanh(),
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
    }
}

fn act_grad(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Identity => 1.0,
        Activation::Tanh => {
            let t = z.tanh();
            1.0 - t * t
        }
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Loss and gradient of the full model by scalar loops.
pub fn loss_and_gradient(spec: &ModelSpec, params: &[f64], inputs: &Matrix, targets: &Matrix) -> (f64, Vec<f64>) {
    let layers = dense_layers(spec);
    let x0 = to_rows(inputs);
    let t = to_rows(targets);
    let n = x0.len();

    // acts[l] is the input to layer l; zs[l] its pre-activation.
    let mut acts = vec![x0];
    let mut zs = Vec::new();
    for l in &layers {
        let input = acts.last().unwrap();
        let mut z = vec![vec![0.0; l.fan_out]; n];
        let mut a = vec![vec![0.0; l.fan_out]; n];
        for s in 0..n {
            for j in 0..l.fan_out {
                let mut acc = params[l.offset + l.fan_in * l.fan_out + j];
                for k in 0..l.fan_in {
                    acc += params[l.offset + j * l.fan_in + k] * input[s][k];
                }
                z[s][j] = acc;
                a[s][j] = act(l.act, acc);
            }
        }
        zs.push(z);
        acts.push(a);
    }

    let y = acts.last().unwrap();
    let outs = y[0].len();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut delta = vec![vec![0.0; outs]; n];
    match spec.loss {
        Loss::Mse => {
            for s in 0..n {
                for j in 0..outs {
                    let d = y[s][j] - t[s][j];
                    loss += d * d;
                    delta[s][j] = 2.0 * d / nf;
                }
            }
        }
        Loss::SoftmaxCrossEntropy => {
            for s in 0..n {
                let mut max = f64::NEG_INFINITY;
                for j in 0..outs {
                    max = max.max(y[s][j]);
                }
                let mut denom = 0.0;
                for j in 0..outs {
                    denom += (y[s][j] - max).exp();
                }
                let ld = denom.ln();
                for j in 0..outs {
                    let lp = y[s][j] - max - ld;
                    loss -= t[s][j] * lp;
                    delta[s][j] = (lp.exp() - t[s][j]) / nf;
                }
            }
        }
    }
    loss /= nf;

    let mut grad = vec![0.0; params.len()];
    for (li, l) in layers.iter().enumerate().rev() {
        let input = &acts[li];
        let z = &zs[li];
        let mut dz = vec![vec![0.0; l.fan_out]; n];
        for s in 0..n {
            for j in 0..l.fan_out {
                dz[s][j] = match l.act {
                    Activation::Identity => delta[s][j],
                    a => delta[s][j] * act_grad(a, z[s][j]),
                };
            }
        }
        for j in 0..l.fan_out {
            for k in 0..l.fan_in {
                let mut acc = 0.0;
                for s in 0..n {
                    acc += dz[s][j] * input[s][k];
                }
                grad[l.offset + j * l.fan_in + k] = acc;
            }
            let mut acc = 0.0;
            for s in 0..n {
                acc += dz[s][j];
            }
            grad[l.offset + l.fan_in * l.fan_out + j] = acc;
        }
        let mut dx = vec![vec![0.0; l.fan_in]; n];
        for s in 0..n {
            for k in 0..l.fan_in {
                let mut acc = 0.0;
                for j in 0..l.fan_out {
                    acc += params[l.offset + j * l.fan_in + k] * dz[s][j];
                }
                dx[s][k] = acc;
            }
        }
        delta = dx;
    }
    (loss, grad)
}

pub fn loss(spec: &ModelSpec, params: &[f64], inputs: &Matrix, targets: &Matrix) -> f64 {
    loss_and_gradient(spec, params, inputs, targets).0
}

/// Central finite differences, one coordinate at a time.
pub fn fd_gradient(spec: &ModelSpec, params: &[f64], inputs: &Matrix, targets: &Matrix, h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss(spec, &p, inputs, targets);
            p[i] = orig - h;
            let down = loss(spec, &p, inputs, targets);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Plain sequential SGD. Returns the parameters after every applied update,
/// starting with `init`.
pub fn sgd_reference(spec: &ModelSpec, init: &[f64], batches: &[Batch], eta: f64, n_accum: usize) -> Vec<Vec<f64>> {
    let mut params = init.to_vec();
    let mut traj = vec![params.clone()];
    let mut sum = vec![0.0; params.len()];
    let mut pending = 0;
    for b in batches {
        let (_, g) = loss_and_gradient(spec, &params, &b.inputs, &b.targets);
        let step = if n_accum <= 1 {
            g
        } else {
            for i in 0..sum.len() {
                sum[i] += g[i];
            }
            pending += 1;
            if pending < n_accum {
                continue;
            }
            pending = 0;
            let mean: Vec<f64> = sum.iter().map(|s| s / n_accum as f64).collect();
            sum.iter_mut().for_each(|s| *s = 0.0);
            mean
        };
        if eta != 0.0 {
            for i in 0..params.len() {
                params[i] -= eta * step[i];
            }
        }
        traj.push(params.clone());
    }
    traj
}

/// Synchronous data parallelism: every step each replica takes a gradient
/// step from the shared point and the results are averaged.
pub fn averaged_sgd_reference(spec: &ModelSpec, init: &[f64], per_replica: &[Vec<Batch>], eta: f64) -> Vec<Vec<f64>> {
    let steps = per_replica.iter().map(Vec::len).min().unwrap_or(0);
    let mut x = init.to_vec();
    let mut traj = vec![x.clone()];
    for k in 0..steps {
        let replicas: Vec<Vec<f64>> = per_replica
            .iter()
            .map(|bs| {
                let (_, g) = loss_and_gradient(spec, &x, &bs[k].inputs, &bs[k].targets);
                x.iter().zip(&g).map(|(p, g)| p - eta * g).collect()
            })
            .collect();
        x = mean_reference(&replicas);
        traj.push(x.clone());
    }
    traj
}

pub fn mean_reference(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    let len = vectors.first().map_or(0, Vec::len);
    let mut out = vec![0.0; len];
    for i in 0..len {
        let mut s = 0.0;
        for v in vectors {
            s += v[i];
        }
        out[i] = s / n;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub assignment: Assignment,
    pub fitness: Fitness,
    pub feasible: bool,
    pub evaluated: u64,
}

/// Fitness of one assignment, written out directly from the definition.
pub fn fitness_reference(assign: &[usize], pool: &NodePool, footprint: &ModelFootprint, q: usize) -> Fitness {
    let m = footprint.m();
    let min_bw = pool.nodes.iter().fold(f64::INFINITY, |acc, n| if n.bandwidth < acc { n.bandwidth } else { acc });
    let lambda = 10.0 * m / min_bw;
    let mut sums = Vec::with_capacity(q);
    let mut penalty = 0.0;
    for c in 0..q {
        let members: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == c).collect();
        let ram: f64 = members.iter().map(|&i| pool.nodes[i].ram).sum();
        let mut t = 0.0;
        for &i in &members {
            let share = m * pool.nodes[i].ram / ram;
            t += share / pool.nodes[i].bandwidth;
        }
        if members.is_empty() {
            t = 0.0;
            penalty += lambda;
        }
        if ram < m {
            penalty += lambda * (1.0 + (m - ram) / m);
        }
        sums.push(t);
    }
    let mut imbalance: f64 = 0.0;
    for a in 0..q {
        for b in a + 1..q {
            imbalance = imbalance.max((sums[a] - sums[b]).abs());
        }
    }
    Fitness { imbalance, penalty, total: imbalance + penalty }
}

/// Whether every cluster is non-empty and holds at least `M` bytes of RAM.
pub fn feasible_reference(assign: &[usize], pool: &NodePool, footprint: &ModelFootprint, q: usize) -> bool {
    (0..q).all(|c| {
        let ram: f64 = (0..assign.len()).filter(|&i| assign[i] == c).map(|i| pool.nodes[i].ram).sum();
        assign.contains(&c) && ram >= footprint.m()
    })
}

/// Enumerates all `q^N` assignments; ties go to the lexicographically first.
pub fn exhaustive_partition(pool: &NodePool, footprint: &ModelFootprint, q: usize) -> ExhaustiveResult {
    let n = pool.len();
    let total = (q as u64).checked_pow(n as u32).expect("search space fits u64");
    assert!(total <= 1_000_000, "exhaustive search limited to 1e6 assignments, got {total}");
    let mut assign = vec![0usize; n];
    let mut best: Option<(Vec<usize>, Fitness)> = None;
    for code in 0..total {
        let mut rest = code;
        for i in (0..n).rev() {
            assign[i] = (rest % q as u64) as usize;
            rest /= q as u64;
        }
        let f = fitness_reference(&assign, pool, footprint, q);
        if best.as_ref().is_none_or(|(_, b)| f.total < b.total) {
            best = Some((assign.clone(), f));
        }
    }
    let (a, f) = best.expect("at least one assignment");
    let feasible = feasible_reference(&a, pool, footprint, q);
    ExhaustiveResult { assignment: Assignment(a), fitness: f, feasible, evaluated: total }
}

/// Idle fraction of a strict one-batch-at-a-time pipeline, from an explicit
/// timeline: forwards run stage 0..P, then backwards P..0, and only then
/// does the next batch enter.
pub fn sync_pipeline_schedule(fwd: &[f64], bwd: &[f64]) -> f64 {
    let p = fwd.len();
    if p <= 1 {
        return 0.0;
    }
    let mut busy = vec![0.0; p];
    let mut clock = 0.0;
    let mut timeline = Vec::new();
    for s in 0..p {
        timeline.push((s, clock, clock + fwd[s]));
        clock += fwd[s];
    }
    for s in (0..p).rev() {
        timeline.push((s, clock, clock + bwd[s]));
        clock += bwd[s];
    }
    for (s, start, end) in timeline {
        busy[s] += end - start;
    }
    busy.iter().map(|b| 1.0 - b / clock).sum::<f64>() / p as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clusterform::PoolNode;
    use crate::simnet::NodeId;

    #[test]
    fn zero_eta_trajectory_is_constant() {
        let spec = ModelSpec::linear(2, 1);
        let b = Batch {
            inputs: Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap(),
            targets: Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            batch_id: 0,
            cluster_id: 0,
        };
        let traj = sgd_reference(&spec, &[0.5, -0.5, 0.1], &[b.clone(), b], 0.0, 1);
        assert!(traj.iter().all(|p| p == &vec![0.5, -0.5, 0.1]));
    }

    #[test]
    fn one_linear_step_closed_form() {
        let spec = ModelSpec::linear(1, 1);
        let b = Batch {
            inputs: Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            targets: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            batch_id: 0,
            cluster_id: 0,
        };
        // Residual 1 gives gradients (4, 2).
        let traj = sgd_reference(&spec, &[1.0, 0.0], &[b], 0.25, 1);
        assert_eq!(traj[1], vec![0.0, -0.5]);
    }

    #[test]
    fn means() {
        assert_eq!(mean_reference(&[vec![2.0, 4.0], vec![4.0, 8.0]]), vec![3.0, 6.0]);
        assert_eq!(mean_reference(&vec![vec![1.5; 3]; 4]), vec![1.5; 3]);
    }

    #[test]
    fn exhaustive_two_nodes_splits() {
        let pool = NodePool::new(vec![
            PoolNode { id: NodeId(0), ram: 10.0, bandwidth: 1.0 },
            PoolNode { id: NodeId(1), ram: 10.0, bandwidth: 2.0 },
        ])
        .unwrap();
        let fp = ModelFootprint { batch_size: 1, fwdbwd_bytes_per_sample: 0.0, param_bytes: 4.0 };
        let r = exhaustive_partition(&pool, &fp, 2);
        assert_eq!(r.assignment.0, vec![0, 1]);
        assert!(r.feasible);
        assert_eq!(r.evaluated, 4);
    }

    #[test]
    fn exhaustive_flags_infeasible() {
        let pool = NodePool::new(vec![
            PoolNode { id: NodeId(0), ram: 1.0, bandwidth: 1.0 },
            PoolNode { id: NodeId(1), ram: 1.0, bandwidth: 1.0 },
        ])
        .unwrap();
        let fp = ModelFootprint { batch_size: 1, fwdbwd_bytes_per_sample: 0.0, param_bytes: 4.0 };
        let r = exhaustive_partition(&pool, &fp, 2);
        assert!(!r.feasible);
        assert!(r.fitness.penalty > 0.0);
    }

    #[test]
    fn sync_schedule_closed_forms() {
        assert_eq!(sync_pipeline_schedule(&[1.0], &[2.0]), 0.0);
        assert!((sync_pipeline_schedule(&[1.0; 3], &[2.0; 3]) - 2.0 / 3.0).abs() < 1e-15);
        // Stage totals 1 and 3 over a 4-second cycle: idle 3/4 and 1/4.
        assert!((sync_pipeline_schedule(&[0.5, 1.0], &[0.5, 2.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fd_matches_quadratic() {
        let spec = ModelSpec::linear(1, 1);
        let x = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        let t = Matrix::from_vec(1, 1, vec![0.4]).unwrap();
        let p = [0.7, -0.2];
        let g = fd_gradient(&spec, &p, &x, &t, 1e-5);
        let r = 0.7 * 1.5 - 0.2 - 0.4;
        assert!((g[0] - 2.0 * r * 1.5).abs() < 1e-9);
        assert!((g[1] - 2.0 * r).abs() < 1e-9);
    }
}
