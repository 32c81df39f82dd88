//! Iterative kernel-synthesis engine over a self-evolving, value-scored memory bank.
//!
//! The crate is organised around the main loop: [`memory`] stores and retrieves
//! experience, [`valuation`] scores it with bandit-style Q-values, [`generator`]
//! turns task + context into candidate code, [`verifier`] gates candidates and
//! measures latency, and [`orchestrator`] wires the loop together. [`simenv`]
//! provides a deterministic synthetic environment for desk-scale experiments,
//! and [`metrics`] / [`config`] cover reporting and configuration.

pub mod config;
pub mod generator;
pub mod infra;
pub mod memory;
pub mod metrics;
pub mod orchestrator;
pub mod simenv;
pub mod valuation;
pub mod verifier;

mod util;

pub use util::stable_hash64;
