//! Federated learning simulator for early dropout prediction.
//!
//! The pipeline: synthetic session histories ([`synthgen`]) are windowed and
//! labeled ([`dataset`]), distributed over clients, optionally filtered or
//! rebalanced ([`resampling`]), and used to train a small MLP ([`neuralnet`])
//! centrally or with FedAvg ([`federation`]). [`metrics`] scores the held-out
//! users and [`experiment`] drives the full settings-by-scenarios grid.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod neuralnet;
pub mod resampling;
pub mod seeds;
pub mod synthgen;

pub use error::{Error, Result};
