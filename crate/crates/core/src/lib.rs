//! False-data injection against a safety-filtered control loop.
//!
//! The crate simulates an inverted pendulum guarded by an observer, a
//! residual detector and a barrier-function safety filter, and implements an
//! adversary that learns a latent model of the observer from logged data and
//! then spoofs the measurement channel to drive the plant out of its safe set
//! without raising alarms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod config;
pub mod defender;
pub mod error;
pub mod filter;
pub mod harness;
pub mod linalg;
pub mod log;
pub mod plant;
pub mod safeset;
pub mod sysid;

pub use attack::{AttackNorm, AttackState};
pub use config::ScenarioConfig;
pub use error::{Error, Result};
pub use harness::{run_attack, run_collect, run_offline, OfflineArtifacts, RunMetrics};
pub use log::DataLog;
