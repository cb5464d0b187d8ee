//! Simulation and analysis of nonlinearly damped systems
//! `u' + Au + BF(u) = 0` with skew-adjoint `A` and a sector-bounded feedback
//! `F`, discretized in space and time with numerical viscosity.
//!
//! The crate is organised bottom-up:
//! - [`convexity`] builds decay envelopes from the feedback growth law;
//! - [`feedback`] holds the damping nonlinearities;
//! - [`models`] assembles finite-difference systems;
//! - [`integrate`] advances them with the viscous implicit midpoint rule;
//! - [`analysis`] measures decay, observability and mesh uniformity;
//! - [`cli`] runs configured experiments.

pub mod analysis;
pub mod cli;
pub mod convexity;
pub mod error;
pub mod exec;
pub mod feedback;
pub mod integrate;
pub mod linalg;
pub mod manifest;
pub mod models;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
