//! Gridworld reinforcement learning with a persistent memory of past failures.
//!
//! The crate covers the deterministic environment, a tabular Q-learning
//! agent, the ghost database of recorded episodes and policy snapshots,
//! environment disruptions, a rule-based failure taxonomy, the dual-loop
//! action rule that steers away from remembered failures, and the headless
//! simulation and experiment drivers built on top of them.

pub mod agent;
pub mod config;
pub mod disruption;
pub mod dual_loop;
pub mod env;
pub mod error;
pub mod experiment;
pub mod ghost;
pub mod ids;
pub mod rng;
pub mod sim;
pub mod taxonomy;

pub use error::{Error, Result, ValidationReason};
