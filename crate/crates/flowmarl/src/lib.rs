//! Offline multi-agent reinforcement learning built on flow matching.
//!
//! A joint behavior-cloned flow policy captures the multi-modal joint action
//! distribution of an offline dataset; per-agent twin critics with an average
//! mixer supply value estimates; and decentralized one-step policies are
//! distilled from the joint flow under shared noise while maximizing the
//! mixed value. Exact small-sample optimal transport and a histogram mutual
//! information estimator provide machine-checkable bounds relating the
//! distillation residual to the distance between the joint and factored
//! policies and to their value gap.

pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod dataset;
pub mod distill;
pub mod env;
pub mod error;
pub mod exec;
pub mod flow;
pub mod latency;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
