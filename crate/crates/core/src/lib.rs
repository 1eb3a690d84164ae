//! Alternator++: a latent-variable sequence model that alternates between
//! emitting observations from latents and updating latents from
//! observations, with learned noise models on both sides.
//!
//! The crate covers the full workflow:
//!
//! - [`tape`], [`nn`]: tensor autodiff and the networks `f_θ`, `g_φ`, `ε_ψ`, `ε_ν`
//! - [`schedule`], [`model`], [`checkpoint`]: the generative process and its storage
//! - [`training`]: the composite objective, Adam, cosine annealing
//! - [`tasks`]: MAR masking, imputation and ensemble forecasting
//! - [`metrics`]: MMD, CRPS, MAE/MSE/correlation
//! - [`data`]: CSV ingestion, normalization, synthetic generators, splits
//!
//! Batch-level work runs through [`Exec`], which uses rayon when the
//! `parallel` feature is on and produces bitwise-identical results either way.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, Result};
pub use exec::Exec;
pub use model::{AlternatorModel, Dynamics, LatentPropagation, NetworkTemplate, Trajectory};
pub use nn::{Activation, Network, NetworkKind, NetworkSpec, ParameterSet};
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
