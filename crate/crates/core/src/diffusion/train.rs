//! `L_simple` training loop with conditioning dropout.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::conditioning::{apply_conditioning_dropout, Conditioning, ConditioningDropout};
use super::denoiser::Denoiser;
use super::optim::{AdamW, AdamWConfig};
use super::params::Parameters;
use super::schedule::{forward_noise, NoiseSchedule};
use super::NoisePredictor;
use crate::error::{config, numeric, validation, Result};
use crate::parallel::{try_map_indexed, Execution};
use crate::real::Real;

/// One training record: clean latent plus its full conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub x0: Array2<T>,
    pub cond: Conditioning<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub dropout: ConditioningDropout,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            dropout: ConditioningDropout::default(),
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        self.optimizer.validate()?;
        self.dropout.validate()
    }
}

/// `mean((eps - eps_theta(alpha_t x0 + sigma_t eps, c, t))^2)`.
pub fn training_loss<T: Real, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    x0: &Array2<T>,
    cond: &Conditioning<T>,
    t: usize,
    eps: &Array2<T>,
    schedule: &NoiseSchedule,
) -> Result<T> {
    let x_t = forward_noise(x0, t, eps, schedule)?.x;
    let pred = model.predict(&x_t, t, cond)?;
    if pred.dim() != eps.dim() {
        return Err(validation("noise prediction shape does not match latent"));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(numeric(format!("non-finite noise prediction at t = {t}")));
    }
    let n = T::lit(eps.len() as f64);
    Ok(pred.iter().zip(eps).map(|(&p, &e)| (e - p) * (e - p)).sum::<T>() / n)
}

/// Independent stream seed for batch element `index` at `step`.
pub fn sample_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random choices for one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw<T> {
    pub record: usize,
    pub t: usize,
    pub eps: Array2<T>,
    pub dropout: (f64, f64),
}

impl<T: Real> SampleDraw<T> {
    pub fn draw(seed: u64, n_records: usize, shape: (usize, usize), train_steps: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let record = rng.random_range(0..n_records);
        let t = rng.random_range(0..=train_steps);
        let eps = Array2::from_shape_simple_fn(shape, || T::lit(rng.sample::<f64, _>(StandardNormal)));
        let dropout = (rng.random::<f64>(), rng.random::<f64>());
        Self { record, t, eps, dropout }
    }
}

pub struct Trainer<T> {
    pub model: Denoiser<T>,
    pub optimizer: AdamW<T>,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Denoiser<T>, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer, &model)?;
        Ok(Self { model, optimizer, schedule, config, step: 0 })
    }

    /// Continues from saved state; `step` is the number of completed steps.
    pub fn resume(model: Denoiser<T>, optimizer: AdamW<T>, schedule: NoiseSchedule, config: TrainConfig, step: usize) -> Result<Self> {
        config.validate()?;
        let mut optimizer = optimizer;
        optimizer.config = config.optimizer;
        Ok(Self { model, optimizer, schedule, config, step })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Mean loss and gradient over one batch; gradients are reduced in batch order.
    pub fn batch_gradient(&self, data: &[TrainingExample<T>], step: usize) -> Result<(f64, Denoiser<T>)> {
        if data.is_empty() {
            return Err(config("training dataset is empty"));
        }
        let b = self.config.batch_size;
        let per_sample = try_map_indexed(self.config.execution, b, |i| {
            let seed = sample_seed(self.config.seed, step as u64, i as u64);
            let shape = data[0].x0.dim();
            let d = SampleDraw::<T>::draw(seed, data.len(), shape, self.schedule.steps());
            let ex = &data[d.record];
            if ex.x0.dim() != shape {
                return Err(validation(format!("record {} latent shape differs from record 0", d.record)));
            }
            let cond = apply_conditioning_dropout(&ex.cond, &self.config.dropout, d.dropout);
            let (loss, grad) = self.model.loss_and_grad(&ex.x0, &cond, d.t, &d.eps, &self.schedule)?;
            if !loss.is_finite() {
                return Err(numeric(format!(
                    "non-finite loss at step {step}, batch element {i} (record {}, t = {}, mode {:?})",
                    d.record, d.t, cond.mode
                )));
            }
            Ok((loss.to_f64_lossy(), grad))
        })?;
        let mut total = self.model.zeros_like();
        let scale = T::lit(1.0 / b as f64);
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            total.add_scaled(g, scale);
        }
        Ok((loss / b as f64, total))
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self, data: &[TrainingExample<T>]) -> Result<f64> {
        let (loss, grad) = self.batch_gradient(data, self.step)?;
        if grad.param_slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(numeric(format!("non-finite gradient at step {}", self.step)));
        }
        self.optimizer.update(&mut self.model, &grad);
        self.step += 1;
        Ok(loss)
    }

    /// Runs `steps` more steps, calling `on_step` after each with the loss.
    pub fn run(
        &mut self,
        data: &[TrainingExample<T>],
        steps: usize,
        mut on_step: impl FnMut(&Self, f64) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let loss = self.train_step(data)?;
            losses.push(loss);
            on_step(self, loss)?;
        }
        Ok(losses)
    }
}

/// Trains a fresh trainer for `config.steps` steps.
pub fn train<T: Real>(
    model: Denoiser<T>,
    schedule: NoiseSchedule,
    train_config: TrainConfig,
    data: &[TrainingExample<T>],
) -> Result<(Denoiser<T>, Vec<f64>)> {
    if data.is_empty() {
        return Err(config("training dataset is empty"));
    }
    let mut trainer = Trainer::new(model, schedule, train_config)?;
    let losses = trainer.run(data, train_config.steps, |_, _| Ok(()))?;
    Ok((trainer.model, losses))
}
