//! Iterative step-level process refinement for small simulated agents.
//!
//! The crate bundles deterministic text environments, a linear-softmax
//! policy, Monte-Carlo step rewards, contrastive pair construction and the
//! mixture preference optimizer, plus the run driver and analyses.

pub mod config;
pub mod dataset;
pub mod driver;
pub mod env;
pub mod eval;
pub mod error;
pub mod gridhouse;
pub mod manifest;
pub mod mixture;
pub mod pairs;
pub mod policy;
pub mod report;
pub mod reward_model;
pub mod rng;
pub mod scorer;
pub mod sft;
pub mod shopsim;
pub mod toy;

pub use error::{Error, Result};
