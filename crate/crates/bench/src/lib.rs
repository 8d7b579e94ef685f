//! Inputs shared by the benchmarks.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ravnest::clusterform::{ModelFootprint, NodePool, PoolNode};
use ravnest::multiring::ClusterLayout;
use ravnest::simnet::NodeId;
use ravnest::{Batch, Matrix, ParameterVector};

/// `clusters` replicas of a `dims`-long vector, each cut into `peers`
/// equal segments.
pub fn equal_layouts(clusters: usize, peers: usize, dims: usize) -> Vec<ClusterLayout> {
    let bounds: Vec<usize> = (0..=peers).map(|i| i * dims / peers).collect();
    vec![bounds.windows(2).map(|w| w[0]..w[1]).collect(); clusters]
}

pub fn random_params(seed: u64, clusters: usize, dims: usize) -> Vec<ParameterVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clusters)
        .map(|_| ParameterVector::flat((0..dims).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

pub fn random_pool(seed: u64, n: usize) -> NodePool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n as u32)
        .map(|i| PoolNode { id: NodeId(i), ram: rng.random_range(0.2e9..1.5e9), bandwidth: rng.random_range(1e7..1e9) })
        .collect();
    NodePool::new(nodes).expect("valid pool")
}

pub fn footprint() -> ModelFootprint {
    ModelFootprint { batch_size: 1, fwdbwd_bytes_per_sample: 4e8, param_bytes: 6e8 }
}

pub fn random_batches(seed: u64, n: usize, rows: usize, inputs: usize, outputs: usize) -> VecDeque<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |r: usize, c: usize| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
    };
    (0..n as u64)
        .map(|batch_id| Batch { inputs: fill(rows, inputs), targets: fill(rows, outputs), batch_id, cluster_id: 0 })
        .collect()
}
