//! Experiment configuration files.
//!
//! A config is TOML with fixed sections; unknown keys are rejected. Relative
//! paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clusterform::{plan_session, GaParams, ModelFootprint, NodePool, SessionPlan};
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::orchestrator::{plan_topology, TrainConfig};
use crate::simnet::{NodeSpec, Topology};

pub const SEED_ENV: &str = "RAVNEST_SEED";

/// How clusters are formed and connected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    /// Node inventory; when present clusters come from the GA.
    #[serde(default)]
    pub inventory: Option<PathBuf>,
    /// Explicit network; otherwise a uniform one is generated.
    #[serde(default)]
    pub topology: Option<PathBuf>,
    /// Number of clusters `Q` for GA formation.
    #[serde(default)]
    pub q: Option<usize>,
    /// Peers per cluster when no inventory is given.
    #[serde(default)]
    pub peers: Vec<usize>,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default = "default_latency")]
    pub latency: f64,
}

fn default_bandwidth() -> f64 {
    1e9
}

fn default_latency() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub cluster: ClusterSection,
    #[serde(default)]
    pub ga: GaParams,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        Ok(cfg)
    }

    /// Parses, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.cluster.inventory);
        fix(&mut self.cluster.topology);
    }

    /// Replaces every seed with `RAVNEST_SEED` when it is set.
    pub fn apply_env_seed(&mut self) -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed: u64 = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
                self.set_seed(seed);
                Ok(Some(seed))
            }
            Err(_) => Ok(None),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.ga.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        Model::new(self.model.clone())?;
        if self.dataset.features() != self.model.arch[0] {
            return Err(Error::Config(format!(
                "dataset has {} features, model expects {}",
                self.dataset.features(),
                self.model.arch[0]
            )));
        }
        if self.dataset.outputs() != *self.model.arch.last().expect("validated") {
            return Err(Error::Config(format!(
                "dataset has {} outputs, model produces {}",
                self.dataset.outputs(),
                self.model.arch.last().expect("validated")
            )));
        }
        for p in [&self.cluster.inventory, &self.cluster.topology].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file not found")));
            }
        }
        match (&self.cluster.inventory, self.cluster.q) {
            (Some(_), None) => return Err(Error::Config("cluster.q is required with an inventory".into())),
            (None, _) if self.cluster.peers.is_empty() => {
                return Err(Error::Config("cluster.peers or cluster.inventory is required".into()));
            }
            _ => {}
        }
        if self.cluster.peers.contains(&0) {
            return Err(Error::Config("cluster.peers entries must be >= 1".into()));
        }
        if !(self.cluster.bandwidth > 0.0) || !(self.cluster.latency >= 0.0) {
            return Err(Error::Config("cluster.bandwidth must be > 0 and cluster.latency >= 0".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Arc<Dataset>> {
        Ok(Arc::new(self.dataset.generate()?))
    }

    /// Builds the session plan and the network it runs on.
    pub fn session(&self) -> Result<(SessionPlan, Topology)> {
        let plan = match &self.cluster.inventory {
            Some(path) => {
                let pool = NodePool::load(path)?;
                plan_session(&pool, &self.model, self.train.batch_size, self.cluster.q.expect("validated"), &self.ga)?
            }
            None => SessionPlan::uniform(&self.model, self.train.batch_size, &self.cluster.peers)?,
        };
        let topology = match (&self.cluster.topology, &self.cluster.inventory) {
            (Some(path), _) => Topology::load(path)?,
            (None, Some(path)) => pool_topology(&NodePool::load(path)?, self.cluster.latency),
            (None, None) => plan_topology(&plan, self.cluster.bandwidth, self.cluster.latency),
        };
        Ok((plan, topology))
    }
}

/// Network with one node per inventory entry.
pub fn pool_topology(pool: &NodePool, latency: f64) -> Topology {
    Topology {
        default_latency: latency,
        nodes: pool
            .nodes
            .iter()
            .map(|n| NodeSpec { id: n.id, ram_bytes: n.ram, bandwidth_bps: n.bandwidth, speed_factor: 1.0 })
            .collect(),
        links: Vec::new(),
    }
}

/// Footprint input for cluster formation: either a model and batch size, or
/// the raw byte counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FootprintFile {
    Model { batch_size: usize, model: ModelSpec },
    Raw(ModelFootprint),
}

impl FootprintFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display(), e))
    }

    pub fn footprint(&self) -> Result<ModelFootprint> {
        match self {
            FootprintFile::Model { batch_size, model } => Ok(ModelFootprint::from_model(&Model::new(model.clone())?, *batch_size)),
            FootprintFile::Raw(f) => {
                if !(f.m() > 0.0) {
                    return Err(Error::Config(format!("footprint M={} must be positive", f.m())));
                }
                Ok(*f)
            }
        }
    }
}
