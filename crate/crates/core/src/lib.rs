//! Distillation-based federated learning simulator.
//!
//! Devices train a shared dense network on a mix of hard-label
//! cross-entropy and KL divergence towards label-wise soft targets, then
//! upload both a model delta and their own label-wise prediction averages.
//! The server aggregates each by dataset size. FedAvg (deltas only) and
//! federated distillation (soft targets only) run through the same code
//! path as baselines.
//!
//! - [`nn`]: network, mixed loss, gradients and SGD
//! - [`data`]: IDX ingestion, synthetic data, device partitioning
//! - [`soft_targets`]: the soft-target matrix and its aggregation
//! - [`protocol`]: the round loop, schedule, ledger and metrics
//! - [`convergence`]: empirical rate check on a strongly convex surrogate

pub mod convergence;
pub mod data;
pub mod error;
pub mod nn;
pub mod protocol;
pub mod soft_targets;

pub use error::{Error, Result};
