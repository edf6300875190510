//! In-context reward adaptation with linear attention.
//!
//! A single linear-attention layer reads a prompt of preference demonstrations
//! and predicts the preference of an unseen query. With binary choices alone the
//! readout estimates a nonlinear moment of the human's reward parameter and cannot
//! adapt out of distribution; weighting each choice by its inverse response time
//! (drift-diffusion model) recovers a linear statistic and restores adaptation.
//!
//! Modules:
//! - [`model`]: domain types and Bradley–Terry kernels
//! - [`synthgen`]: synthetic tasks with drift-diffusion response times
//! - [`prompts`]: prompt matrices
//! - [`attention`]: the linear-attention layer and its predictors
//! - [`training`]: losses, gradients, Hessian probes and projected gradient descent
//! - [`oracles`]: closed-form and quadrature ground truths
//! - [`numerics`]: quadrature, bisection and line fits
//! - [`eval`]: accuracy, rate sweeps and reports
//! - [`ingest`]: behavioral choice data and polynomial features

pub mod attention;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod oracles;
pub mod prompts;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
pub use model::{
    bt_prob, expected_choice, logistic, tanh_half, Demonstration, FeatureDiff, FeatureDist,
    LabelMode, Observation, PopulationSpec, RewardParam, TaskSample, ThetaDist,
};
pub use rng::RngSeed;
