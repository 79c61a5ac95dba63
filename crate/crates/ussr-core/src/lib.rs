//! Core library for universal and segmentation-specific user representation
//! learning.
//!
//! The crate is split along the training pipeline:
//!
//! * [`tensor`] / [`graph`] / [`optim`]: a small deterministic dense-tensor
//!   engine with reverse-mode differentiation and plain SGD.
//! * [`encoding`]: feature statistics, log transforms, frequency-ranked
//!   sparse indices, and batch construction.
//! * [`universal`]: mixture-of-Gaussians information-bottleneck model with
//!   cluster gate, per-cluster Gaussian heads and priors, universal decoder.
//! * [`bipartite`]: segment representations learned by bipartite neural
//!   interaction between cluster representations and segment features.
//! * [`expansion`]: adaptive growth of clusters and segments with frozen
//!   previously-learned parameters.
//! * [`metrics`] / [`checkpoint`]: AUC evaluation and bit-exact state
//!   serialization.
//!
//! Everything here is `no_std`-compatible (`alloc` required); file IO, CLI,
//! and configuration live in the companion `ussr` crate.

#![cfg_attr(all(not(feature = "std"), not(test)), no_std)]

extern crate alloc;

pub mod bipartite;
pub mod checkpoint;
pub mod encoding;
pub mod error;
pub mod expansion;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod universal;

mod bytes;
mod fmath;

pub use error::{CoreError, Result};
pub use graph::{Evaluation, Gradients, Graph, NodeId};
pub use optim::ParamSet;
pub use tensor::Tensor;
