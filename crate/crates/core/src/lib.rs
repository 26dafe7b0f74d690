//! Batch multi-object trajectory estimation over a fixed window of scans.
//!
//! The posterior over sets of trajectories is a trajectory Poisson multi-Bernoulli
//! mixture: a Poisson point process for so-far-undetected trajectories plus one
//! Bernoulli component per measurement, where each global hypothesis corresponds to
//! a partition of the measurements into track histories. Global hypotheses are
//! indexed by per-scan association vectors and explored by Markov chain Monte Carlo:
//! either systematic-scan blocked Gibbs sweeps or a Metropolis-Hastings sampler with
//! track update, merge, split and switch moves.
//!
//! Crate layout:
//! - [`types`]: Gaussian moments, mixture components, local hypotheses, weight utilities.
//! - [`linear`]: linear-Gaussian motion/measurement models, Kalman primitives, smoothing, gating.
//! - [`recursion`]: the per-track filtering recursion and memoized local-hypothesis weights.
//! - [`assoc`]: association variables, validity constraints, histories, posterior log-weights.
//! - [`gibbs`] and [`mh`]: the two samplers over association space.
//! - [`store`]: deduplicated record of visited global hypotheses.
//! - [`estimator`]: maximum a posteriori trajectory extraction with smoothing.
//! - [`metrics`]: trajectory generalized optimal sub-pattern assignment metric.
//! - [`sim`]: ground-truth and measurement simulation, including the bundled
//!   six-object crossing benchmark.

pub mod assoc;
pub mod error;
pub mod estimator;
pub mod gibbs;
pub mod linear;
pub mod metrics;
pub mod mh;
pub mod recursion;
pub mod sim;
pub mod store;
#[cfg(test)]
mod testkit;
pub mod types;

pub use error::{Error, Result};

/// Version stamped into every file this crate writes or reads.
pub const SCHEMA_VERSION: u32 = 1;
