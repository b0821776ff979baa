//! Desk-scale region-control experiment: train on synthetic scenes, then
//! sample with conflicting text/image colors and a half-image mask.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::{generate_scenes, reference_patchwork, text_tokens, Rgb};
use crate::diffusion::conditioning::{Conditioning, MaskSettings};
use crate::diffusion::sampler::{sample_batch, GuidanceConfig};
use crate::diffusion::train::{Trainer, TrainConfig, TrainingExample};
use crate::diffusion::{build_schedule, Denoiser, DenoiserConfig, LatentCodec, ScheduleKind};
use crate::error::{config, Result};
use crate::mask_ops::{default_zero_threshold, BinaryMask};
use crate::parallel::{try_map_indexed, Execution};
use crate::patch_encoder::ImageTensor;

/// Minimum RGB distance between the two prompt colors of a probe.
pub const MIN_COLOR_CONFLICT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionExperiment {
    pub image_size: usize,
    pub n_scenes: usize,
    pub n_samples: usize,
    pub train_steps: usize,
    pub diffusion_steps: usize,
    pub seed: u64,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub mask: MaskSettings,
    pub guidance: GuidanceConfig,
}

impl RegionExperiment {
    /// 16x16 scenes, P = 4, latent factor 2, two conv + adapter blocks.
    pub fn desk(seed: u64) -> Self {
        let size = 16;
        let patch = 4;
        Self {
            image_size: size,
            n_scenes: 500,
            n_samples: 50,
            train_steps: 2000,
            diffusion_steps: 1000,
            seed,
            model: DenoiserConfig {
                latent_channels: 3,
                image_channels: 3,
                patch_size: patch,
                n_patches: (size / patch) * (size / patch),
                width: 32,
                d_ctx: 64,
                d_k: 16,
                heads: 1,
                blocks: 2,
                lambda: 1.0,
                compressed_tokens: None,
                scale_compression: false,
            },
            train: TrainConfig { steps: 2000, seed, ..TrainConfig::default() },
            mask: MaskSettings { patch_size: patch, zero_threshold: default_zero_threshold(patch), latent_factor: 2, vote_threshold: 0.5 },
            guidance: GuidanceConfig::default(),
        }
    }
}

/// One conflicting-prompt probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub text_color: Rgb,
    pub image_color: Rgb,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: Probe,
    /// Mean `[0, 1]` RGB of the generated masked region.
    pub region_color: Rgb,
    pub dist_image: f64,
    pub dist_text: f64,
}

impl ProbeResult {
    pub fn follows_image(&self) -> bool {
        self.dist_image < self.dist_text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub probes: Vec<ProbeResult>,
    pub image_wins: usize,
    pub train_seconds: f64,
}

impl RegionReport {
    pub fn win_rate(&self) -> f64 {
        self.image_wins as f64 / self.probes.len().max(1) as f64
    }

    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

fn l2(a: Rgb, b: Rgb) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over the first and last `window` entries.
pub fn loss_window_means(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&losses[..w.min(losses.len())]), mean(&losses[losses.len().saturating_sub(w)..]))
}

/// Color pairs at least [`MIN_COLOR_CONFLICT`] apart, drawn from `seed`.
pub fn conflicting_probes(n: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let text_color: Rgb = [rng.random(), rng.random(), rng.random()];
        let image_color: Rgb = [rng.random(), rng.random(), rng.random()];
        if l2(text_color, image_color) >= MIN_COLOR_CONFLICT {
            out.push(Probe { text_color, image_color, seed: rng.random() });
        }
    }
    out
}

/// Left half of the image is the image-prompt region.
pub fn half_mask(size: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |_, c| c < size / 2)
}

pub fn probe_conditioning(probe: &Probe, mask: &BinaryMask, model: &DenoiserConfig, settings: &MaskSettings) -> Result<Conditioning<f32>> {
    let reference = reference_patchwork(probe.image_color, mask, settings.patch_size, probe.seed)?;
    Conditioning::build(text_tokens(probe.text_color, model.d_ctx), &reference, mask, settings)
}

/// Scores one generated image against its probe.
pub fn score_probe(probe: &Probe, image: &ImageTensor<f32>, mask: &BinaryMask) -> Result<ProbeResult> {
    let mean = image
        .masked_channel_mean(|r, c| mask.get(r, c) == 1)
        .ok_or_else(|| config("probe mask selects no pixels"))?;
    let region_color: Rgb = [0, 1, 2].map(|i| (mean[i] + 1.0) / 2.0);
    Ok(ProbeResult {
        probe: probe.clone(),
        region_color,
        dist_image: l2(region_color, probe.image_color),
        dist_text: l2(region_color, probe.text_color),
    })
}

pub fn run_region_experiment(exp: &RegionExperiment, exec: Execution) -> Result<(Denoiser<f32>, RegionReport)> {
    let codec = LatentCodec::new(exp.mask.latent_factor)?;
    let scenes = generate_scenes::<f32>(exp.n_scenes, exp.seed, exp.image_size, exp.mask.patch_size, exp.model.d_ctx, exec)?;
    let data: Vec<TrainingExample<f32>> = try_map_indexed(exec, scenes.len(), |i| scenes[i].to_example(&codec, &exp.mask))?;
    let schedule = build_schedule(exp.diffusion_steps, ScheduleKind::LinearBeta)?;
    let model = Denoiser::<f32>::new(exp.model, exp.seed)?;
    let mut train_cfg = exp.train;
    train_cfg.execution = exec;
    let mut trainer = Trainer::new(model, schedule.clone(), train_cfg)?;
    let start = Instant::now();
    let losses = trainer.run(&data, exp.train_steps, |_, _| Ok(()))?;
    let train_time: Duration = start.elapsed();
    let (initial_loss, final_loss) = loss_window_means(&losses, 100);

    let mask = half_mask(exp.image_size);
    let probes = conflicting_probes(exp.n_samples, exp.seed ^ 0x5EED_0F_9B0BE5);
    let jobs = probes
        .iter()
        .map(|p| Ok((probe_conditioning(p, &mask, &exp.model, &exp.mask)?, p.seed)))
        .collect::<Result<Vec<_>>>()?;
    let images = sample_batch(&trainer.model, &schedule, &codec, &jobs, &exp.guidance, exec)?;
    let probes = probes.iter().zip(&images).map(|(p, img)| score_probe(p, img, &mask)).collect::<Result<Vec<_>>>()?;
    let image_wins = probes.iter().filter(|p| p.follows_image()).count();
    let report = RegionReport { losses, initial_loss, final_loss, probes, image_wins, train_seconds: train_time.as_secs_f64() };
    Ok((trainer.model, report))
}
