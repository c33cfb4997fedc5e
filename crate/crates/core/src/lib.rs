//! Partially pooled network scale-up estimation.
//!
//! Aggregated relational data ([`ard`]) feed a hierarchical negative binomial
//! model ([`model`]), fitted by Hamiltonian Monte Carlo ([`sampler`]). Posterior
//! draws are calibrated against known groups and summarised by [`estimator`],
//! which also carries the classical scale-up baseline. [`simulator`] produces
//! synthetic surveys from the same generative model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ard;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod diagnostics;
pub mod estimator;
pub mod simulator;
