//! Genetic-algorithm cluster formation.
//!
//! Nodes are grouped into `Q` clusters so that every cluster can hold the
//! whole model (its RAM sum reaches the peak footprint `M`) while the
//! per-cluster sums of transfer times stay as close as possible. A member's
//! transfer time is its RAM-proportional share of `M` divided by its
//! bandwidth, which is the same share the partitioner later assigns it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{partition_model, Model, ModelSpec, SubmodelSpec};
use crate::multiring::{build_ring_schedule, RingSchedule};
use crate::simnet::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolNode {
    pub id: NodeId,
    pub ram: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePool {
    pub nodes: Vec<PoolNode>,
}

impl NodePool {
    pub fn new(nodes: Vec<PoolNode>) -> Result<Self> {
        let mut ids: Vec<NodeId> = nodes.iter().map(|n| n.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate node id in pool".into()));
        }
        if let Some(n) = nodes.iter().find(|n| !(n.ram > 0.0) || !(n.bandwidth > 0.0)) {
            return Err(Error::Config(format!("node {} needs positive ram and bandwidth", n.id)));
        }
        Ok(Self { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_ram(&self) -> f64 {
        self.nodes.iter().map(|n| n.ram).sum()
    }

    /// Reads CSV rows `id,ram,bandwidth` (header required).
    pub fn from_csv_reader<R: std::io::Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::parse(origin, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "ram", "bandwidth"] {
            return Err(Error::parse(origin, format!("expected header id,ram,bandwidth, got {headers:?}")));
        }
        let mut nodes = Vec::new();
        for row in rdr.deserialize::<(u32, f64, f64)>() {
            let (id, ram, bandwidth) = row.map_err(|e| Error::parse(origin, e))?;
            nodes.push(PoolNode { id: NodeId(id), ram, bandwidth });
        }
        Self::new(nodes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, &path.display().to_string())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ram,bandwidth\n");
        for n in &self.nodes {
            out.push_str(&format!("{},{:?},{:?}\n", n.id.0, n.ram, n.bandwidth));
        }
        out
    }
}

/// Peak memory of one model replica:
/// `M = batch_size * fwdbwd_bytes_per_sample + param_bytes`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFootprint {
    pub batch_size: usize,
    pub fwdbwd_bytes_per_sample: f64,
    pub param_bytes: f64,
}

impl ModelFootprint {
    pub fn from_model(model: &Model, batch_size: usize) -> Self {
        Self {
            batch_size,
            fwdbwd_bytes_per_sample: model.layers().iter().map(|l| l.fwdbwd_bytes_per_sample() as f64).sum(),
            param_bytes: model.param_bytes() as f64,
        }
    }

    pub fn m(&self) -> f64 {
        self.batch_size as f64 * self.fwdbwd_bytes_per_sample + self.param_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(move |(_, c)| **c == cluster).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    /// Seconds.
    pub imbalance: f64,
    pub penalty: f64,
    pub total: f64,
}

impl Fitness {
    pub fn is_feasible(&self) -> bool {
        self.penalty == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub ram: f64,
    pub empty: f64,
}

impl PenaltyWeights {
    /// Ten times the largest possible per-cluster transfer-time sum, so any
    /// violation outweighs every achievable imbalance.
    pub fn for_pool(pool: &NodePool, footprint: &ModelFootprint) -> Self {
        let min_bw = pool.nodes.iter().map(|n| n.bandwidth).fold(f64::INFINITY, f64::min);
        let scale = 10.0 * footprint.m() / min_bw;
        Self { ram: scale, empty: scale }
    }
}

/// Sum of member transfer times for each of `q` clusters (0 when empty),
/// plus each cluster's RAM.
fn cluster_sums(assignment: &Assignment, pool: &NodePool, m: f64, q: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut ram = vec![0.0; q];
    let mut count = vec![0usize; q];
    for (node, &c) in pool.nodes.iter().zip(&assignment.0) {
        ram[c] += node.ram;
        count[c] += 1;
    }
    let mut time = vec![0.0; q];
    for (node, &c) in pool.nodes.iter().zip(&assignment.0) {
        time[c] += m * node.ram / ram[c] / node.bandwidth;
    }
    (time, ram, count)
}

/// Imbalance is the largest pairwise difference of per-cluster transfer-time
/// sums. Each cluster short of `M` RAM costs `weights.ram * (1 + deficit/M)`;
/// each empty cluster costs `weights.empty`.
pub fn evaluate(
    assignment: &Assignment,
    pool: &NodePool,
    footprint: &ModelFootprint,
    q: usize,
    weights: &PenaltyWeights,
) -> Fitness {
    let m = footprint.m();
    let (time, ram, count) = cluster_sums(assignment, pool, m, q);
    let max = time.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = time.iter().copied().fold(f64::INFINITY, f64::min);
    let imbalance = if q <= 1 { 0.0 } else { max - min };
    let mut penalty = 0.0;
    for c in 0..q {
        if count[c] == 0 {
            penalty += weights.empty;
        }
        if ram[c] < m {
            penalty += weights.ram * (1.0 + (m - ram[c]) / m);
        }
    }
    Fitness { imbalance, penalty, total: imbalance + penalty }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaParams {
    pub pop_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism_k: usize,
    pub tournament_size: usize,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            pop_size: 192,
            generations: 300,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            elitism_k: 2,
            tournament_size: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evolution {
    pub best: Assignment,
    pub fitness: Fitness,
    /// Best-so-far total fitness after each generation.
    pub history: Vec<f64>,
    pub feasible: bool,
}

fn random_assignment(rng: &mut ChaCha8Rng, n: usize, q: usize) -> Assignment {
    Assignment((0..n).map(|_| rng.random_range(0..q)).collect())
}

/// Evolves assignments of `pool` into `q` clusters, returning the best
/// individual seen in any generation.
pub fn evolve(pool: &NodePool, footprint: &ModelFootprint, q: usize, params: &GaParams) -> Result<Evolution> {
    if q == 0 || pool.len() < q {
        return Err(Error::Config(format!("cannot form {q} clusters from {} nodes", pool.len())));
    }
    if params.pop_size < 2 || params.generations < 1 || params.tournament_size < 1 {
        return Err(Error::Config("GA needs pop_size >= 2, generations >= 1, tournament_size >= 1".into()));
    }
    let weights = PenaltyWeights::for_pool(pool, footprint);
    let n = pool.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let score = |a: &Assignment| evaluate(a, pool, footprint, q, &weights);

    let mut population: Vec<(Assignment, Fitness)> = (0..params.pop_size)
        .map(|_| {
            let a = random_assignment(&mut rng, n, q);
            let f = score(&a);
            (a, f)
        })
        .collect();
    let mut best = population[0].clone();
    let mut history = Vec::with_capacity(params.generations);

    for _ in 0..params.generations {
        population.sort_by(|a, b| a.1.total.total_cmp(&b.1.total));
        if population[0].1.total < best.1.total {
            best = population[0].clone();
        }
        history.push(best.1.total);

        let elites = params.elitism_k.min(params.pop_size);
        let mut next: Vec<(Assignment, Fitness)> = population[..elites].to_vec();
        while next.len() < params.pop_size {
            let p1 = tournament(&population, params.tournament_size, &mut rng);
            let p2 = tournament(&population, params.tournament_size, &mut rng);
            let mut child = if rng.random_bool(params.crossover_rate) {
                Assignment(
                    p1.0.iter().zip(&p2.0).map(|(&a, &b)| if rng.random_bool(0.5) { a } else { b }).collect(),
                )
            } else {
                p1.clone()
            };
            for gene in child.0.iter_mut() {
                if rng.random_bool(params.mutation_rate) {
                    *gene = rng.random_range(0..q);
                }
            }
            let f = score(&child);
            next.push((child, f));
        }
        population = next;
    }
    population.sort_by(|a, b| a.1.total.total_cmp(&b.1.total));
    if population[0].1.total < best.1.total {
        best = population[0].clone();
        if let Some(last) = history.last_mut() {
            *last = best.1.total;
        }
    }
    let feasible = best.1.is_feasible();
    Ok(Evolution { best: best.0, fitness: best.1, history, feasible })
}

fn tournament<'a>(pop: &'a [(Assignment, Fitness)], size: usize, rng: &mut ChaCha8Rng) -> &'a Assignment {
    let mut pick = &pop[rng.random_range(0..pop.len())];
    for _ in 1..size {
        let other = &pop[rng.random_range(0..pop.len())];
        if other.1.total < pick.1.total {
            pick = other;
        }
    }
    &pick.0
}

/// Runs [`evolve`] for each candidate cluster count.
pub fn sweep_q(pool: &NodePool, footprint: &ModelFootprint, qs: &[usize], params: &GaParams) -> Result<Vec<(usize, Evolution)>> {
    qs.iter().map(|&q| evolve(pool, footprint, q, params).map(|e| (q, e))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub cluster_id: usize,
    /// Nodes in pipeline order.
    pub nodes: Vec<NodeId>,
    pub submodels: Vec<SubmodelSpec>,
}

/// Everything needed to start training: clusters, their layouts and rings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub model: ModelSpec,
    pub batch_size: usize,
    pub footprint_bytes: f64,
    pub assignment: Option<Assignment>,
    pub fitness: Option<Fitness>,
    pub clusters: Vec<ClusterPlan>,
    pub schedule: RingSchedule,
}

impl SessionPlan {
    /// Builds a plan from explicit node groups, splitting each cluster's
    /// layers in proportion to the given capacities.
    pub fn from_groups(model: &ModelSpec, batch_size: usize, groups: &[(Vec<NodeId>, Vec<f64>)]) -> Result<Self> {
        let built = Model::new(model.clone())?;
        let mut clusters = Vec::with_capacity(groups.len());
        for (cluster_id, (nodes, caps)) in groups.iter().enumerate() {
            if nodes.len() != caps.len() || nodes.is_empty() {
                return Err(Error::Session(format!("cluster {cluster_id}: need one capacity per node")));
            }
            let submodels = partition_model(&built, caps, batch_size)
                .map_err(|e| Error::Session(format!("cluster {cluster_id}: {e}")))?;
            clusters.push(ClusterPlan { cluster_id, nodes: nodes.clone(), submodels });
        }
        let layouts: Vec<Vec<SubmodelSpec>> = clusters.iter().map(|c| c.submodels.clone()).collect();
        let schedule = build_ring_schedule(&layouts)?;
        Ok(Self {
            model: model.clone(),
            batch_size,
            footprint_bytes: ModelFootprint::from_model(&built, batch_size).m(),
            assignment: None,
            fitness: None,
            clusters,
            schedule,
        })
    }

    /// `peers[c]` equal-capacity peers per cluster on densely numbered nodes.
    pub fn uniform(model: &ModelSpec, batch_size: usize, peers: &[usize]) -> Result<Self> {
        let mut next = 0u32;
        let groups: Vec<(Vec<NodeId>, Vec<f64>)> = peers
            .iter()
            .map(|&p| {
                let nodes = (next..next + p as u32).map(NodeId).collect();
                next += p as u32;
                (nodes, vec![f64::MAX / 1e3; p])
            })
            .collect();
        Self::from_groups(model, batch_size, &groups)
    }

    pub fn peer_counts(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.nodes.len()).collect()
    }

    pub fn endpoints(&self) -> Vec<Vec<NodeId>> {
        self.clusters.iter().map(|c| c.nodes.clone()).collect()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }
}

/// Forms clusters with the GA, partitions the model inside each cluster by
/// RAM, and builds the ring schedule.
pub fn plan_session(
    pool: &NodePool,
    model: &ModelSpec,
    batch_size: usize,
    q: usize,
    params: &GaParams,
) -> Result<SessionPlan> {
    let built = Model::new(model.clone())?;
    let footprint = ModelFootprint::from_model(&built, batch_size);
    let m = footprint.m();
    let evo = evolve(pool, &footprint, q, params)?;
    if !evo.feasible {
        let (_, ram, count) = cluster_sums(&evo.best, pool, m, q);
        let deficits: Vec<String> = ram
            .iter()
            .zip(&count)
            .enumerate()
            .filter(|(_, (r, n))| **r < m || **n == 0)
            .map(|(c, (r, n))| format!("cluster {c}: {n} nodes, deficit {:.0} bytes", (m - r).max(0.0)))
            .collect();
        return Err(Error::Session(format!(
            "no feasible assignment into {q} clusters for footprint M={m:.0} bytes; {}",
            deficits.join("; ")
        )));
    }
    let groups: Vec<(Vec<NodeId>, Vec<f64>)> = (0..q)
        .map(|c| {
            let members: Vec<usize> = evo.best.members(c).collect();
            (members.iter().map(|&i| pool.nodes[i].id).collect(), members.iter().map(|&i| pool.nodes[i].ram).collect())
        })
        .collect();
    let mut plan = SessionPlan::from_groups(model, batch_size, &groups)?;
    plan.assignment = Some(evo.best);
    plan.fitness = Some(evo.fitness);
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Loss};

    fn pool(spec: &[(f64, f64)]) -> NodePool {
        NodePool::new(
            spec.iter().enumerate().map(|(i, &(ram, bandwidth))| PoolNode { id: NodeId(i as u32), ram, bandwidth }).collect(),
        )
        .unwrap()
    }

    fn footprint(m: f64) -> ModelFootprint {
        ModelFootprint { batch_size: 1, fwdbwd_bytes_per_sample: 0.0, param_bytes: m }
    }

    #[test]
    fn footprint_formula() {
        let f = ModelFootprint { batch_size: 32, fwdbwd_bytes_per_sample: 10.0, param_bytes: 5.0 };
        assert_eq!(f.m(), 325.0);
    }

    #[test]
    fn single_cluster_has_no_imbalance() {
        let p = pool(&[(10.0, 1.0), (20.0, 5.0)]);
        let f = evaluate(&Assignment(vec![0, 0]), &p, &footprint(5.0), 1, &PenaltyWeights::for_pool(&p, &footprint(5.0)));
        assert_eq!(f.imbalance, 0.0);
        assert!(f.is_feasible());
    }

    #[test]
    fn symmetric_pair_is_perfect() {
        let p = pool(&[(10.0, 2.0), (10.0, 2.0)]);
        let fp = footprint(8.0);
        let f = evaluate(&Assignment(vec![0, 1]), &p, &fp, 2, &PenaltyWeights::for_pool(&p, &fp));
        assert_eq!((f.imbalance, f.penalty), (0.0, 0.0));
    }

    #[test]
    fn transfer_time_uses_ram_shares() {
        // Cluster 0: rams 1 and 3 share M=8 as 2 and 6 over bandwidths 1 and 2 -> 2 + 3 = 5.
        // Cluster 1: ram 8, bandwidth 4 -> 8/4 = 2.
        let p = pool(&[(1.0, 1.0), (3.0, 2.0), (8.0, 4.0)]);
        let fp = footprint(8.0);
        let w = PenaltyWeights::for_pool(&p, &fp);
        let f = evaluate(&Assignment(vec![0, 0, 1]), &p, &fp, 2, &w);
        assert!((f.imbalance - 3.0).abs() < 1e-12);
        assert!(f.penalty > 0.0, "cluster 0 has only 4 bytes of RAM");
        assert_eq!(w.ram, 10.0 * 8.0 / 1.0);
        assert!((f.penalty - w.ram * 1.5).abs() < 1e-9);
    }

    #[test]
    fn empty_cluster_is_penalized() {
        let p = pool(&[(10.0, 1.0), (10.0, 1.0)]);
        let fp = footprint(5.0);
        let f = evaluate(&Assignment(vec![0, 0]), &p, &fp, 2, &PenaltyWeights::for_pool(&p, &fp));
        assert!(!f.is_feasible());
        assert!(f.total > f.imbalance);
    }

    #[test]
    fn two_nodes_two_clusters_split() {
        let p = pool(&[(10.0, 1.0), (10.0, 3.0)]);
        let evo = evolve(&p, &footprint(5.0), 2, &GaParams { generations: 5, pop_size: 8, ..GaParams::default() }).unwrap();
        assert!(evo.feasible);
        assert_ne!(evo.best.0[0], evo.best.0[1]);
    }

    #[test]
    fn evolution_is_deterministic_and_monotone() {
        let p = pool(&[(4.0, 1.0), (6.0, 3.0), (5.0, 2.0), (9.0, 7.0), (3.0, 1.5), (7.0, 2.5)]);
        let params = GaParams { seed: 42, generations: 40, ..GaParams::default() };
        let a = evolve(&p, &footprint(6.0), 3, &params).unwrap();
        let b = evolve(&p, &footprint(6.0), 3, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.history.len(), 40);
    }

    #[test]
    fn infeasible_pool_is_flagged() {
        let p = pool(&[(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)]);
        let evo = evolve(&p, &footprint(5.0), 2, &GaParams { generations: 10, ..GaParams::default() }).unwrap();
        assert!(!evo.feasible);
    }

    #[test]
    fn inventory_csv_round_trips() {
        let p = pool(&[(1.5e9, 1.25e7), (8e9, 1e8)]);
        assert_eq!(NodePool::from_csv_reader(p.to_csv().as_bytes(), "mem").unwrap(), p);
        assert!(NodePool::from_csv_reader("id,ram\n1,2\n".as_bytes(), "mem").is_err());
    }

    fn four_layer() -> ModelSpec {
        ModelSpec::new(vec![8, 8, 8, 8, 8], Activation::Tanh, Loss::Mse)
    }

    #[test]
    fn homogeneous_session() {
        let m = ModelFootprint::from_model(&Model::new(four_layer()).unwrap(), 4).m();
        let p = pool(&[(0.6 * m, 1e6), (0.6 * m, 1e6), (0.6 * m, 1e6), (0.6 * m, 1e6)]);
        let plan = plan_session(&p, &four_layer(), 4, 2, &GaParams { seed: 1, ..GaParams::default() }).unwrap();
        assert_eq!(plan.peer_counts(), vec![2, 2]);
        assert_eq!(plan.clusters[0].submodels, plan.clusters[1].submodels);
        assert_eq!(plan.schedule.rings.len(), 2);
    }

    #[test]
    fn lopsided_session_has_three_rings() {
        let six = ModelSpec::new(vec![8; 7], Activation::Tanh, Loss::Mse);
        let m = ModelFootprint::from_model(&Model::new(six.clone()).unwrap(), 4).m();
        // One node holds the whole model; the other three only fit it together.
        let p = pool(&[(m * 1.05, 3e6), (m * 0.45, 1e6), (m * 0.45, 1e6), (m * 0.45, 1e6)]);
        let plan = plan_session(&p, &six, 4, 2, &GaParams { seed: 3, ..GaParams::default() }).unwrap();
        let mut counts = plan.peer_counts();
        counts.sort_unstable();
        assert_eq!(counts, vec![1, 3]);
        assert_eq!(plan.schedule.rings.len(), 3);
    }

    #[test]
    fn infeasible_session_names_m() {
        let p = pool(&[(10.0, 1.0), (10.0, 1.0)]);
        let err = plan_session(&p, &four_layer(), 4, 2, &GaParams { generations: 5, ..GaParams::default() }).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("M=") && text.contains("deficit"), "{text}");
    }

    #[test]
    fn plan_round_trips_through_toml() {
        let plan = SessionPlan::uniform(&four_layer(), 4, &[2, 1]).unwrap();
        let back = SessionPlan::from_toml_str(&plan.to_toml_string(), "mem").unwrap();
        assert_eq!(back, plan);
    }
}
