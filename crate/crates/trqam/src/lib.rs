//! Trust-region fine-tuning of flow-matching policies.
//!
//! The library implements behavior-cloning pretraining of a flow policy,
//! critic-guided fine-tuning through a lean-adjoint matching objective, and a
//! trust-region controller that pins the path-space KL between the fine-tuned
//! and pretrained samplers to a prescribed budget by projected dual descent on
//! the diffusion-scaling parameter. Two ablation baselines (fixed-temperature
//! matching and a loss-level KL penalty) share the same machinery.
//!
//! The [`oracles`] module carries independent analytic and brute-force
//! implementations of every theoretical quantity the trainer relies on
//! (exponential-tilting bounds, the Girsanov control-cost identity, the
//! data-processing inequality, the shared-covariance Gaussian chain KL, and a
//! full-backpropagation gradient reference); `trqam verify` runs them all.

pub mod adjoint;
pub mod cli;
pub mod config;
pub mod critic;
pub mod envs;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod numerics;
pub mod oracles;
pub mod trainer;
pub mod trust_region;

pub use error::{Error, Result};
