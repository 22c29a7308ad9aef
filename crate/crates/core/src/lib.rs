//! Bayes-adaptive policy-gradient laboratory.
//!
//! - [`hypothesis`]: candidate MDPs, beliefs, trajectories
//! - [`bayes`]: posterior updates, posterior-weighted values, exact DP
//! - [`advantage`]: trace-level progress rewards and posterior-weighted advantages
//! - [`trace_format`]: JSON Lines trace fixtures and advantage reports
//! - [`tree`]: binary-tree environment contrasting Markovian and adaptive returns
//! - [`token_repeat`]: the repeat-the-prompt-token task
//! - [`policy`]: small attention policy with hand-written backpropagation
//! - [`trainer`]: seeded Markovian / BARL training runs and evaluation
//! - [`verify`]: invariant suites shared by the CLI and the tests

pub mod advantage;
pub mod bayes;
pub mod error;
pub mod hypothesis;
pub mod policy;
pub mod token_repeat;
pub mod trace_format;
pub mod trainer;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
