//! Closed-loop simulator and model-predictive controllers for a two-site
//! combined-heat-and-power district energy benchmark.
//!
//! The plant couples gas turbines, a two-machine electric network tied to an
//! infinite bus, and a steam pipeline whose thermal inertia acts as storage.
//! A feedback-linearizing coordinate change splits the dynamics into linear
//! output chains plus nonlinear internal (pressure) dynamics; the proposed
//! controller discretizes the chains exactly, linearizes the internal
//! transition map along the previous plan, and solves a small dense QP every
//! sampling period. A structure-blind nonlinear MPC serves as the timing
//! baseline.

pub mod ad;
pub mod harness;
pub mod integrate;
pub mod ltv_mpc;
pub mod nmpc;
pub mod plant;
pub mod qpsolve;
pub mod transform;

pub use harness::scenario::Scenario;
pub use harness::signal::{gen_signal, load_signal};
pub use harness::SimLog;
pub use ltv_mpc::{LtvController, MpcConfig};
pub use nmpc::{NlpOptions, NmpcController};
pub use plant::{PlantParams, PlantState};
pub use qpsolve::{QpProblem, QpSolution};
pub use transform::{HurwitzGains, TransformedState};

/// Shipped default parameter set. Identical to `params/default.json`; the
/// file is embedded so library users and the CLI agree bit-for-bit.
pub fn default_params() -> PlantParams {
    plant::PlantParams::from_json_str(include_str!("../../../params/default.json"))
        .expect("embedded default parameter file is valid")
}
