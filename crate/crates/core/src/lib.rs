//! Ensemble Kalman inversion for linear inverse problems `y = Au + η`.
//!
//! The crate provides the discrete ensemble update and an adaptive
//! integrator for its continuous-time limit, the Gram-matrix diagnostics
//! that describe ensemble collapse and misfit decay, closed-form oracles for
//! those diagnostics, a family of discrepancy-type stopping rules, and a
//! one-dimensional elliptic test problem with a Karhunen–Loève prior.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod elliptic;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod prior;
pub mod rk;
pub mod rng;
pub mod spectral;
pub mod stopping;
pub mod verify;

pub use dynamics::{discrete_step, integrate, vector_field, IntegratorSettings, Snapshot, StopEvent, Trajectory};
pub use ensemble::{compute_diagnostics, Diagnostics, Ensemble, LinearForwardModel};
pub use error::{EkiError, Result};
pub use spectral::{build_split, SpectralE, SubspaceSplit};
pub use stopping::{PreparedRule, RuleKind, StoppingRule};
