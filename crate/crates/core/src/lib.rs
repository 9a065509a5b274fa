//! Time-delay-embedded EDMD of hybrid systems with a state-history LQR.
//!
//! The pipeline: simulate a plant ([`hybrid_sim`], [`systems`]), fit a linear
//! operator on delay windows ([`tde_koopman`]), then track the nominal orbit
//! with an LQR on the window of state errors ([`history_lqr`]).
//! [`experiment`] wires these together for the command-line tool.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod history_lqr;
pub mod hybrid_sim;
pub mod io;
pub mod numkernel;
pub mod report;
pub mod systems;
pub mod tde_koopman;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use history_lqr::HistoryLqrController;
pub use hybrid_sim::{DisturbanceSchedule, GuardedReset, HybridSystemSpec, Trajectory};
pub use numkernel::Matrix;
pub use report::RmseReport;
pub use tde_koopman::{HankelParams, KoopmanModel};
