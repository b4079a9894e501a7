//! Adaptive nonlinear MPC over a governed ensemble of frozen specialist
//! dynamics models, built on a white-box symbolic expression-graph engine.
//!
//! The pipeline, bottom to top:
//!
//! * [`symgraph`] — hash-consed expression DAGs, instruction-tape
//!   evaluation, reverse-mode differentiation, structural sparsity.
//! * [`vehicle`] — dynamic single-track car model with simplified Pacejka
//!   tire forces, both as plain numerics and as a parametric graph.
//! * [`specialists`] — small MLP dynamics surrogates trained per operating
//!   regime, frozen, and embedded back into expression graphs.
//! * [`governor`] — online convex re-weighting of the specialist ensemble
//!   from a sliding window of observed transitions.
//! * [`ocp`] — single-shooting optimal-control transcription and an SQP
//!   solver with box and steering-rate constraints.
//! * [`scenarios`] — closed-loop simulation tiers, benchmarks, and
//!   reporting used by the command-line driver.

pub mod error;
pub mod governor;
pub mod ocp;
pub mod optim;
pub mod scenarios;
pub mod specialists;
pub mod symgraph;
pub mod vehicle;

pub use error::{CoreError, Result};
