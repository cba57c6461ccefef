//! Mask-guided diffusion editing on small trainable denoisers.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f32` (the default everywhere in the CLI) or `f64`.

pub mod assignment;
pub mod bounds;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffedit;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod stats;

pub use config::RunConfig;
pub use dataset::{DatasetSpec, Family, Sample};
pub use denoiser::{Condition, Denoiser, DenoiserConfig, TrainConfig};
pub use diffedit::{edit, EditMask, EditRequest, EditResult, MaskConfig, MaskOperator, Method};
pub use error::{Error, Result};
pub use eval::{Classifier, SweepConfig, SweepResult};
pub use scalar::Scalar;
pub use schedule::NoiseSchedule;

pub type Denoiser32 = Denoiser<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type Classifier32 = Classifier<f32>;
pub type Classifier64 = Classifier<f64>;
pub type Trajectory32 = sampler::Trajectory<f32>;
pub type Trajectory64 = sampler::Trajectory<f64>;
