//! Cluster formation, asynchronous pipeline training and multi-ring
//! parameter averaging, all running on a deterministic simulated network.

pub mod clusterform;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod multiring;
pub mod orchestrator;
pub mod oracle;
pub mod pipeline;
pub mod simnet;

pub use clusterform::{Assignment, Fitness, GaParams, ModelFootprint, NodePool, PoolNode, SessionPlan};
pub use config::ExperimentConfig;
pub use data::{Batch, Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use model::{Activation, Loss, Matrix, Model, ModelSpec, ParameterVector, SubmodelSpec};
pub use multiring::{RingSchedule, RingMember};
pub use orchestrator::{BarrierMode, Kappa, MetricRow, TrainConfig, TrainReport};
pub use pipeline::{ComputeCost, PipelineConfig, StalenessRecord};
pub use simnet::{Message, MessageKind, NodeId, Topology};
