//! Simulation laboratory for co-training a policy and a reward model from
//! each other's outputs on synthetic tabular alignment problems.
//!
//! Modules map onto the moving parts of the loop:
//!
//! - [`env`]: ground truth, prompt partitions, base policy and base reward model
//! - [`policy`]: tabular softmax policy, DPO loss/gradient/trainer, E-step pairs
//! - [`reward`]: Bradley–Terry reward model and trainer
//! - [`em`]: E-step, model selection, pseudo-pairs, filtering, M-step, full runs
//! - [`eval`]: exact oracles for reward, win rate, KL and RM accuracy
//! - [`experiment`]: configuration files, baselines, ablations and artifact output

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod em;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod math;
pub mod pair;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod stats;
pub mod table;

pub use error::{Result, SimError};
