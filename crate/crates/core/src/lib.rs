//! Tube-based, safety-certified distributed MPC for leader-follower
//! formations of nonlinear integrator-chain agents.
//!
//! The crate is organised bottom-up: [`linalg`] and [`model`] hold the numeric
//! kernel and agent dynamics, [`certify`] and [`graph`] produce the offline
//! certificate, [`barrier`] and [`ocp`] build and solve each agent's
//! optimal control problem, [`protocol`] exchanges plans, and [`sim`] runs
//! the closed loop.

pub mod barrier;
pub mod certify;
pub mod error;
pub mod exec;
pub mod graph;
pub mod linalg;
pub mod ocp;
pub mod protocol;
pub mod model;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
