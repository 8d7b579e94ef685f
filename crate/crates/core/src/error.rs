use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("partition error: {reason} (deficit {deficit_bytes:.0} bytes)")]
    Partition { reason: String, deficit_bytes: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("livelock: event budget of {budget} exhausted at t={time:.6}s; {blocked}")]
    Livelock { budget: u64, time: f64, blocked: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("flow-control violation: {0}")]
    FlowControl(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("all-reduce stalled: ring {ring} round {round} member {member}")]
    Stall { ring: usize, round: usize, member: usize },

    #[error("staleness bound violated: batch {batch_id} on cluster {cluster} peer {peer} has tau {tau} > T={bound}")]
    Staleness { cluster: usize, peer: usize, batch_id: u64, tau: u64, bound: u64 },

    #[error("diverged at t={t}: {detail}; last good checkpoint: {last_good}")]
    Divergence { t: u64, detail: String, last_good: String },

    #[error("session error: {0}")]
    Session(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("io error on {path}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, detail: impl std::fmt::Display) -> Self {
        Error::Parse { path: path.to_string(), detail: detail.to_string() }
    }
}
