//! Learnable randomness injection (LRI) for interpretable geometric deep
//! learning on point clouds.
//!
//! The crate provides a message-passing point-cloud classifier and two
//! interpreters trained jointly with it:
//!
//! * [`bernoulli`]: per-point keep probabilities learned through a relaxed
//!   Bernoulli mask, ranking points by *existence* importance;
//! * [`gaussian`]: per-point Gaussian coordinate noise with learned
//!   covariance, ranking points by *location* importance and exposing the
//!   covariance for [`analysis`] of local geometry.
//!
//! Gradient baselines, synthetic datasets with ground-truth labels and the
//! evaluation protocols live in [`baselines`], [`synth`] and [`eval`].

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod bernoulli;
pub mod cloud;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gaussian;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{LriError, Result};
pub use tensor::Mat;
