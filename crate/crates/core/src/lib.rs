//! Doubly-stochastic black-box variational inference.
//!
//! The objective is an expectation over a data index `n` and a base noise
//! variable `ε`. This crate provides the mean-field Gaussian reparameterized
//! objective, a family of gradient estimators (naive, control-variate,
//! incremental, ensemble, and the joint SAGA/SVRG estimators), step rules,
//! variance diagnostics and an experiment harness that emits CSV traces.
//!
//! Data-parallel loops (full-data gradient passes, variance sampling, ELBO
//! evaluation, sweep cells) run on rayon when the `parallel` feature is on,
//! and sequentially otherwise. Both paths reduce in a fixed order, so results
//! are bit-identical regardless of the feature or the worker count.

pub mod data;
pub mod diagnostics;
pub mod dropout_glm;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod models;
pub mod objective;
pub mod optimizers;
pub mod par;
pub mod rng;
pub mod surrogate;
pub mod types;

pub use error::{Error, Result};
pub use estimators::OracleCounter;
pub use models::Model;
pub use objective::Objective;
pub use rng::RngStream;
pub use types::{GradientVector, VariationalParams};
