//! Mask-routed image/text prompt conditioning for a desk-scale latent
//! diffusion pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`mask_ops`]: pixel, patch and latent masks.
//! - [`patch_encoder`]: patchification, masked projection, token compression.
//! - [`prompt_adapter`]: dual and mask-routed cross-attention.
//! - [`diffusion`]: schedule, toy denoiser, training and DDIM sampling.
//! - [`metrics`]: Fréchet distance, Inception Score, mean-of-score.
//! - [`data_synth`]: deterministic synthetic scenes.
//! - [`eval`]: image-folder scoring on top of [`metrics`].
//! - [`experiment`]: the train-then-probe region experiment.
//! - [`pnm`]: binary PPM/PGM reading and writing.

pub mod data_synth;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mask_ops;
pub mod metrics;
pub mod parallel;
pub mod patch_encoder;
pub mod pnm;
pub mod prompt_adapter;
pub mod real;

pub use error::{Error, Result};
pub use parallel::Execution;
pub use real::Real;
