//! Scenario execution: signal handling, closed-loop simulation, logging,
//! benchmarking, and artifact export.

pub mod bench;
pub mod export;
pub mod locus;
pub mod runner;
pub mod scenario;
pub mod signal;

pub use bench::{benchmark, BenchReport};
pub use runner::{run_closed_loop, AbortReason, SimLog, SimRow};

use crate::ltv_mpc::MpcError;
use crate::plant::PlantError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("signal error: {0}")]
    Signal(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
}
