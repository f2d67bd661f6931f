//! Neural Stein critics trained under staged L² regularization.
//!
//! The crate covers the full pipeline for score-based goodness-of-fit testing:
//!
//! * [`distributions`]: Gaussian mixtures and Gauss-Bernoulli RBMs with exact scores.
//! * [`critic`]: a two-hidden-layer Swish MLP with hand-derived gradients of the
//!   Stein loss, including the divergence cross term.
//! * [`stein`]: witness values, discrepancy estimates and the empirical objective.
//! * [`training`]: fixed, staged and adaptive λ schedules with Adam/SGD.
//! * [`metrics`]: oracle MSEs, the oracle-free monitor and the power proxy.
//! * [`gof`]: bootstrap thresholds and Monte-Carlo power estimation.
//! * [`ksd`]: the kernelized Stein discrepancy baseline with a wild bootstrap.
//! * [`ntk`]: zero-time NTK Gram matrices, kernel dynamics and lazy-training checks.
//! * [`cli`]: JSON-configured experiment commands and artifact formats.

pub mod cli;
pub mod critic;
pub mod distributions;
pub mod gof;
pub mod ksd;
pub mod metrics;
pub mod ntk;
pub mod rng;
pub mod stein;
pub mod training;

pub use critic::{DivMode, MlpCritic, ParamVector};
pub use distributions::{
    GaussBernoulliRbm, GaussianMixture, Model, OptimalCritic, Sampler, ScoreField,
};
pub use rng::Rng;
