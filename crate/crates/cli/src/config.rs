//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskfuse::diffusion::sampler::GuidanceConfig;
use maskfuse::diffusion::{AdamWConfig, ConditioningDropout, DenoiserConfig, MaskSettings, TrainConfig};
use maskfuse::mask_ops::default_zero_threshold;
use maskfuse::Execution;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub samples: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoint: "run/model.ckpt".into(),
            loss_log: "run/loss.csv".into(),
            samples: "run/samples".into(),
            report: "run/report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Zero-count threshold; defaults to `ceil(P^2 / 2)`.
    pub zero_threshold: Option<usize>,
    pub proj_size: usize,
    pub latent_factor: usize,
    pub vote_threshold: f64,
    pub lambda: f64,
    pub width: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub compressed_tokens: Option<usize>,
    pub scale_compression: bool,
    pub diffusion_steps: usize,
    pub ddim_steps: usize,
    pub guidance_scale: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub save_every: usize,
    pub p_text_only: f64,
    pub p_mask_applied: f64,
    pub n_scenes: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub execution: Execution,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            zero_threshold: None,
            proj_size: 64,
            latent_factor: 2,
            vote_threshold: 0.5,
            lambda: 1.0,
            width: 32,
            attention_dim: 16,
            heads: 1,
            blocks: 2,
            compressed_tokens: None,
            scale_compression: false,
            diffusion_steps: 1000,
            ddim_steps: 30,
            guidance_scale: 7.5,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            steps: 2000,
            save_every: 500,
            p_text_only: 0.05,
            p_mask_applied: 0.5,
            n_scenes: 100,
            n_samples: 8,
            seed: 0,
            execution: Execution::Parallel,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn zero_threshold(&self) -> usize {
        self.zero_threshold.unwrap_or_else(|| default_zero_threshold(self.patch_size))
    }

    pub fn mask_settings(&self) -> MaskSettings {
        MaskSettings {
            patch_size: self.patch_size,
            zero_threshold: self.zero_threshold(),
            latent_factor: self.latent_factor,
            vote_threshold: self.vote_threshold,
        }
    }

    pub fn model(&self) -> DenoiserConfig {
        let grid = if self.patch_size == 0 { 0 } else { self.image_size / self.patch_size };
        DenoiserConfig {
            latent_channels: 3,
            image_channels: 3,
            patch_size: self.patch_size,
            n_patches: grid * grid,
            width: self.width,
            d_ctx: self.proj_size,
            d_k: self.attention_dim,
            heads: self.heads,
            blocks: self.blocks,
            lambda: self.lambda,
            compressed_tokens: self.compressed_tokens,
            scale_compression: self.scale_compression,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optimizer: AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() },
            dropout: ConditioningDropout { p_text_only: self.p_text_only, p_mask_applied: self.p_mask_applied },
            seed: self.seed,
            execution: self.execution,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig { scale: self.guidance_scale, ddim_steps: self.ddim_steps, eta: 0.0 }
    }

    /// Checks every cross-module constraint; nothing is written before this passes.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("latent_factor", self.latent_factor),
            ("diffusion_steps", self.diffusion_steps),
            ("n_scenes", self.n_scenes),
            ("n_samples", self.n_samples),
            ("save_every", self.save_every),
        ] {
            if v == 0 {
                bail!("{name} must be positive");
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            bail!("image_size {} is not divisible by patch_size {}", self.image_size, self.patch_size);
        }
        if !self.image_size.is_multiple_of(self.latent_factor) {
            bail!("image_size {} is not divisible by latent_factor {}", self.image_size, self.latent_factor);
        }
        if self.zero_threshold() > self.patch_size * self.patch_size {
            bail!("zero_threshold {} exceeds P^2 = {}", self.zero_threshold(), self.patch_size * self.patch_size);
        }
        if !(self.vote_threshold > 0.0 && self.vote_threshold <= 1.0) {
            bail!("vote_threshold {} outside (0, 1]", self.vote_threshold);
        }
        self.model().validate()?;
        self.train().validate()?;
        self.guidance().validate(self.diffusion_steps)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"steps": 10, "paths": {"dataset": "x"}}"#).unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.paths.dataset, PathBuf::from("x"));
        assert_eq!(c.paths.checkpoint, Paths::default().checkpoint);
        assert_eq!(c.batch_size, 8);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"stpes": 10}"#).is_err());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let bad = [
            RunConfig { image_size: 18, ..Default::default() },
            RunConfig { latent_factor: 3, image_size: 16, ..Default::default() },
            RunConfig { zero_threshold: Some(17), ..Default::default() },
            RunConfig { ddim_steps: 2000, ..Default::default() },
            RunConfig { compressed_tokens: Some(16), ..Default::default() },
            RunConfig { p_text_only: 1.5, ..Default::default() },
            RunConfig { lr: -1.0, ..Default::default() },
            RunConfig { heads: 3, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
