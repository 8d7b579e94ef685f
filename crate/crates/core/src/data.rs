//! Synthetic datasets, disjoint per-cluster shards and minibatch sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Shape(format!("{} inputs vs {} targets", inputs.rows(), targets.rows())));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset { inputs: self.inputs.select_rows(rows), targets: self.targets.select_rows(rows) }
    }
}

/// Synthetic generators. All are deterministic in `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `y = W x + b + noise` with standard normal features: a convex
    /// quadratic objective under MSE on a linear model.
    Linear { samples: usize, features: usize, outputs: usize, noise: f64, seed: u64 },
    /// Gaussian clusters with one-hot labels.
    Blobs { samples: usize, features: usize, classes: usize, spread: f64, seed: u64 },
}

impl DatasetSpec {
    pub fn samples(&self) -> usize {
        match self {
            DatasetSpec::Linear { samples, .. } | DatasetSpec::Blobs { samples, .. } => *samples,
        }
    }

    pub fn features(&self) -> usize {
        match self {
            DatasetSpec::Linear { features, .. } | DatasetSpec::Blobs { features, .. } => *features,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            DatasetSpec::Linear { outputs, .. } => *outputs,
            DatasetSpec::Blobs { classes, .. } => *classes,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        match *self {
            DatasetSpec::Linear { samples, features, outputs, noise, seed } => {
                if samples == 0 || features == 0 || outputs == 0 {
                    return Err(Error::Config("linear dataset needs positive sizes".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scale = 1.0 / (features as f64).sqrt();
                let teacher: Vec<f64> =
                    (0..outputs * features).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
                let bias: Vec<f64> = (0..outputs).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut x = Vec::with_capacity(samples * features);
                let mut y = Vec::with_capacity(samples * outputs);
                for _ in 0..samples {
                    let row: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
                    for j in 0..outputs {
                        let mut acc = bias[j];
                        for k in 0..features {
                            acc += teacher[j * features + k] * row[k];
                        }
                        if noise > 0.0 {
                            acc += noise * rng.sample::<f64, _>(StandardNormal);
                        }
                        y.push(acc);
                    }
                    x.extend(row);
                }
                Dataset::new(Matrix::from_vec(samples, features, x)?, Matrix::from_vec(samples, outputs, y)?)
            }
            DatasetSpec::Blobs { samples, features, classes, spread, seed } => {
                if samples == 0 || features == 0 || classes < 2 {
                    return Err(Error::Config("blobs dataset needs samples, features and >= 2 classes".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let centers: Vec<f64> =
                    (0..classes * features).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let mut x = Vec::with_capacity(samples * features);
                let mut y = vec![0.0; samples * classes];
                for s in 0..samples {
                    let c = s % classes;
                    for k in 0..features {
                        x.push(centers[c * features + k] + spread * rng.sample::<f64, _>(StandardNormal));
                    }
                    y[s * classes + c] = 1.0;
                }
                Dataset::new(Matrix::from_vec(samples, features, x)?, Matrix::from_vec(samples, classes, y)?)
            }
        }
    }
}

/// Splits `0..n` into `shards` disjoint index sets, round-robin over a
/// seeded permutation.
pub fn shard_indices(n: usize, shards: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::with_capacity(n / shards.max(1) + 1); shards];
    for (i, idx) in perm.into_iter().enumerate() {
        out[i % shards].push(idx);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub batch_id: u64,
    pub cluster_id: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws consecutive minibatches from one cluster's shard, reshuffling the
/// shard at every epoch. Incomplete tail batches are skipped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    shard: Vec<usize>,
    batch_size: usize,
    cluster_id: usize,
    rng: ChaCha8Rng,
    cursor: usize,
    next_id: u64,
}

impl BatchSampler {
    pub fn new(shard: Vec<usize>, batch_size: usize, cluster_id: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || shard.len() < batch_size {
            return Err(Error::Config(format!(
                "cluster {cluster_id}: shard of {} samples cannot fill a batch of {batch_size}",
                shard.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shard = shard;
        shard.shuffle(&mut rng);
        Ok(Self { shard, batch_size, cluster_id, rng, cursor: 0, next_id: 0 })
    }

    pub fn cluster_id(&self) -> usize {
        self.cluster_id
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Batch {
        if self.cursor + self.batch_size > self.shard.len() {
            self.shard.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let rows = &self.shard[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let batch_id = self.next_id;
        self.next_id += 1;
        Batch {
            inputs: data.inputs.select_rows(rows),
            targets: data.targets.select_rows(rows),
            batch_id,
            cluster_id: self.cluster_id,
        }
    }

    /// The next `n` batches, without disturbing this sampler.
    pub fn preview(&self, data: &Dataset, n: usize) -> Vec<Batch> {
        let mut copy = self.clone();
        (0..n).map(|_| copy.next_batch(data)).collect()
    }
}
