//! Amortized active learning for nonparametric regression.
//!
//! The crate trains a permutation-invariant neural query policy entirely on
//! simulated Gaussian-process functions and deploys it, next to classical
//! GP-entropy and random baselines, on benchmark regression problems.
//!
//! Pipeline, end to end:
//!
//! 1. [`trainer`] draws RBF hyperparameters from a prior, samples cheap GP
//!    function realizations via random Fourier features ([`rff`]), simulates
//!    active-learning rollouts with the policy ([`policy`]) and minimizes one
//!    of four closed-form objectives ([`objectives`]).
//! 2. [`deploy`] runs the trained policy (or a baseline) on a benchmark
//!    problem ([`benchmarks`]), recording queries, labels and per-query wall
//!    time.
//! 3. [`evalreport`] fits a GP to each collected dataset by Type-II maximum
//!    likelihood, evaluates RMSE on held-out points, and aggregates results
//!    with Wilcoxon signed-rank significance against the random baseline.
//!
//! All GP math lives in [`kernel_gp`]; gradients for the training path come
//! from the small reverse-mode tape in [`tape`].

pub mod benchmarks;
pub mod deploy;
pub mod error;
pub mod evalreport;
pub mod kernel_gp;
pub mod linalg;
pub mod objectives;
pub mod policy;
pub mod rff;
pub mod selftest;
pub mod tape;
#[cfg(test)]
pub(crate) mod testkit;
pub mod trainer;

pub use error::{Error, Result};
