//! Conditional diffusion models for regression inference.
//!
//! A score network is fitted by denoising score matching under an
//! Ornstein–Uhlenbeck forward process, the reverse dynamics are simulated with
//! Euler–Maruyama to draw from `Y | X = x`, and the draws feed confidence
//! intervals for the regression function and prediction intervals for new
//! responses.

pub mod checks;
pub mod data;
pub mod dataset;
pub mod diffusion;
pub mod drift;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod nn;
pub mod numeric;
pub mod oracle;
pub mod sampler;
pub mod stats;
pub mod training;

pub use dataset::Dataset;
pub use diffusion::{make_schedule, DiffusionSchedule, Spacing};
pub use drift::{DriftModel, FnDrift};
pub use error::{Error, Result};
pub use inference::{confidence_interval, prediction_interval, sample_moments, IntervalEstimate, IntervalKind};
pub use nn::{init_network, ScoreNetwork};
pub use sampler::{generate, sample_one};
pub use training::{train, TrainConfig, TrainedModel};
