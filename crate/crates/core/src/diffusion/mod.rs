//! Latent diffusion: schedule, sampler, denoiser, training and checkpoints.

pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod denoiser;
pub mod layers;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod train;

use ndarray::Array2;

use crate::error::Result;
use conditioning::Conditioning;

pub use codec::LatentCodec;
pub use conditioning::{apply_conditioning_dropout, ConditioningDropout, ConditioningMode, MaskSettings};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use params::{ParamInfo, Parameters, Section};
pub use optim::{AdamW, AdamWConfig};
pub use sampler::{cfg_combine, ddim_step, ddim_timesteps, sample, sample_latent, sample_trajectory, GuidanceConfig};
pub use schedule::{build_schedule, forward_noise, LatentState, NoiseSchedule, ScheduleKind};
pub use train::{train, training_loss, TrainConfig, Trainer, TrainingExample};

/// Anything that predicts the noise in `x_t` given conditioning.
pub trait NoisePredictor<T>: Sync {
    fn latent_channels(&self) -> usize;
    fn predict(&self, x_t: &Array2<T>, t: usize, cond: &Conditioning<T>) -> Result<Array2<T>>;
}
