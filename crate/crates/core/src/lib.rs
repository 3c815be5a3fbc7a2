//! Event-triggered diffusion extended Kalman filtering for distributed
//! simultaneous localization and clock synchronization.
//!
//! The crate is organised bottom-up:
//!
//! * [`state_model`]: the 5-dim node state `[p_x, p_y, p_z, o, b]` and its
//!   first-order clock dynamics.
//! * [`measurement_model`]: counter-difference, single-sided and
//!   double-sided two-way ranging observations between node pairs.
//! * [`filter_node`]: one node's time update, trigger test, information-form
//!   measurement update and convex diffusion combination.
//! * [`network_sim`]: ground truth, topology, leader-triggered orchestration
//!   and message accounting.
//! * [`analysis`]: covariance upper bounds, inter-trigger bounds, the global
//!   error-covariance recursions and run metrics.

pub mod analysis;
mod error;
pub mod filter_node;
pub mod linalg;
pub mod measurement_model;
pub mod network_sim;
pub mod state_model;

pub use error::{Error, Result};

pub use filter_node::{FilterState, IntermediateEstimate, LinearizedObservation, TriggerPolicy};
pub use measurement_model::{
    Measurement, MeasurementKind, MeasurementKinds, MeasurementNoise, RangingParams,
};
pub use network_sim::{RunLog, Scenario, Topology};
pub use state_model::{NodeState, ProcessNoise, STATE_DIM};

/// Crate version, stamped into run summaries.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
