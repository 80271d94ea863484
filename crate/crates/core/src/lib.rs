//! Differentiable search over data-augmentation policies.
//!
//! A policy has four degrees of freedom: how many transforms to apply (depth),
//! which ones, in which order, and with which magnitudes. All four are sampled
//! through continuous relaxations so that the whole policy can be learned by
//! gradient descent on a validation loss, alternating with the classifier's
//! own training steps.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode tape over dense `f64` tensors.
//! - [`relaxations`]: Gumbel-Softmax, Gumbel-Sinkhorn and magnitude samplers.
//! - [`transforms`]: the fourteen image kernels.
//! - [`policy`]: sampling and applying a policy, schedules, the policy file.
//! - [`data`]: datasets, the synthetic rotation task and the tiny classifier.
//! - [`bilevel`]: the alternating optimizer and the search loop.
//! - [`cli`]: the `augsearch` command-line front end.

pub mod autodiff;
pub mod bilevel;
pub mod cli;
pub mod data;
pub mod error;
pub mod policy;
pub mod relaxations;
pub mod rng;
pub mod transforms;

pub use error::{Error, Result};
