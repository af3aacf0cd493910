//! Deterministic simulator for federated learning on edge devices.
//!
//! The crate bundles a small trainable classifier, synthetic non-IID data,
//! six server aggregation strategies, server-side differential privacy with a
//! Rényi accountant, client dropout, an analytic network model and an energy
//! model. [`sim::run_experiment`] ties them into reproducible experiments
//! described by an [`config::ExperimentConfig`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod model;
pub mod netsim;
pub mod privacy;
pub mod profiles;
pub mod rng;
pub mod sim;
pub mod strategy;
pub mod viability;

pub use error::{Error, Result};
