//! Deterministic DDIM stepping and classifier-free guidance.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codec::LatentCodec;
use super::conditioning::Conditioning;
use super::schedule::NoiseSchedule;
use super::NoisePredictor;
use crate::error::{config, numeric, validation, Result};
use crate::parallel::{try_map_indexed, Execution};
use crate::patch_encoder::ImageTensor;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub ddim_steps: usize,
    /// Only the deterministic sampler (`eta = 0`) is supported.
    pub eta: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 7.5, ddim_steps: 30, eta: 0.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(config(format!("guidance scale {} must be finite and >= 0", self.scale)));
        }
        if self.ddim_steps < 1 || self.ddim_steps > train_steps {
            return Err(config(format!("ddim_steps {} outside [1, {train_steps}]", self.ddim_steps)));
        }
        if self.eta != 0.0 {
            return Err(config("only eta = 0 is supported"));
        }
        Ok(())
    }
}

/// One `eta = 0` DDIM update from `t` to `t_prev`.
///
/// `x0_hat = (x_t - sigma_t eps) / alpha_t`, then
/// `x_prev = alpha_prev x0_hat + sigma_prev eps`.
pub fn ddim_step<T: Real>(
    x_t: &Array2<T>,
    t: usize,
    t_prev: usize,
    eps_pred: &Array2<T>,
    schedule: &NoiseSchedule,
) -> Result<Array2<T>> {
    schedule.check_t(t)?;
    if t_prev > t {
        return Err(validation(format!("DDIM steps backwards only: {t} -> {t_prev}")));
    }
    if x_t.dim() != eps_pred.dim() {
        return Err(validation("noise prediction shape does not match latent"));
    }
    if t_prev == t {
        return Ok(x_t.clone());
    }
    let alpha_t = schedule.alpha(t);
    if alpha_t == 0.0 {
        return Err(numeric(format!("alpha is zero at t = {t}")));
    }
    let x0_hat = predict_x0(x_t, eps_pred, alpha_t, schedule.sigma(t));
    let mut out = x0_hat * T::lit(schedule.alpha(t_prev));
    out.scaled_add(T::lit(schedule.sigma(t_prev)), eps_pred);
    Ok(out)
}

pub fn predict_x0<T: Real>(x_t: &Array2<T>, eps: &Array2<T>, alpha_t: f64, sigma_t: f64) -> Array2<T> {
    let mut x0 = x_t.clone();
    x0.scaled_add(T::lit(-sigma_t), eps);
    x0 / T::lit(alpha_t)
}

/// `eps_uncond + scale (eps_cond - eps_uncond)`.
pub fn cfg_combine<T: Real>(eps_uncond: &Array2<T>, eps_cond: &Array2<T>, scale: T) -> Result<Array2<T>> {
    if eps_uncond.dim() != eps_cond.dim() {
        return Err(validation("guidance inputs have different shapes"));
    }
    let mut out = eps_uncond.clone();
    out.zip_mut_with(eps_cond, |u, &c| *u = *u + scale * (c - *u));
    Ok(out)
}

/// Evenly spaced timesteps from `T` down to `0`, `steps + 1` entries.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > train_steps {
        return Err(validation(format!("DDIM steps {steps} outside [1, {train_steps}]")));
    }
    Ok((0..=steps)
        .rev()
        .map(|k| ((k as f64) * train_steps as f64 / steps as f64).round() as usize)
        .collect())
}

/// Seeded standard Gaussian latent, `rows x cols`.
pub fn gaussian_latent<T: Real>(seed: u64, rows: usize, cols: usize) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::lit(v)
    })
}

/// Full guided DDIM chain. Entry 0 is `x_T`, the last entry is the latent at `t = 0`.
pub fn sample_trajectory<T: Real, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &Conditioning<T>,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<Array2<T>>> {
    guidance.validate(schedule.steps())?;
    let (gh, gw) = cond.grid();
    let ts = ddim_timesteps(schedule.steps(), guidance.ddim_steps)?;
    let uncond = cond.unconditional();
    let scale = T::lit(guidance.scale);
    let mut x = gaussian_latent::<T>(seed, gh * gw, model.latent_channels());
    let mut out = Vec::with_capacity(ts.len());
    out.push(x.clone());
    for (k, pair) in ts.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps_c = model.predict(&x, t, cond)?;
        let eps = if guidance.scale == 1.0 {
            eps_c
        } else {
            cfg_combine(&model.predict(&x, t, &uncond)?, &eps_c, scale)?
        };
        x = ddim_step(&x, t, t_prev, &eps, schedule)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(numeric(format!("non-finite latent at DDIM step {} (t = {t} -> {t_prev})", k + 1)));
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Final latent of [`sample_trajectory`].
pub fn sample_latent<T: Real, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &Conditioning<T>,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Array2<T>> {
    Ok(sample_trajectory(model, schedule, cond, guidance, seed)?.pop().expect("trajectory is never empty"))
}

/// Samples a latent and decodes it to an image.
pub fn sample<T: Real, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    cond: &Conditioning<T>,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<ImageTensor<T>> {
    let latent = sample_latent(model, schedule, cond, guidance, seed)?;
    let (gh, gw) = cond.grid();
    Ok(codec.decode(&latent, gh, gw))
}

/// Independent samples, one per `(cond, seed)` pair, in input order.
pub fn sample_batch<T: Real, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    jobs: &[(Conditioning<T>, u64)],
    guidance: &GuidanceConfig,
    exec: Execution,
) -> Result<Vec<ImageTensor<T>>> {
    try_map_indexed(exec, jobs.len(), |i| sample(model, schedule, codec, &jobs[i].0, guidance, jobs[i].1))
}

#[cfg(test)]
mod tests {
    use super::super::schedule::{build_schedule, forward_noise, ScheduleKind};
    use super::*;
    use crate::patch_encoder::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data() -> (NoiseSchedule, Array2<f64>, Array2<f64>) {
        let s = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (s, random_matrix(5, 3, 1.0, &mut rng), random_matrix(5, 3, 1.0, &mut rng))
    }

    #[test]
    fn zero_eps_scales_by_alpha_ratio() {
        let (s, x, _) = data();
        let out = ddim_step(&x, 700, 400, &Array2::zeros((5, 3)), &s).unwrap();
        let ratio = s.alpha(400) / s.alpha(700);
        assert!((out - &x * ratio).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn exact_noise_recovers_x0() {
        let (s, x0, eps) = data();
        let xt = forward_noise(&x0, 900, &eps, &s).unwrap().x;
        let x0_hat = predict_x0(&xt, &eps, s.alpha(900), s.sigma(900));
        assert!((x0_hat - &x0).iter().all(|d| d.abs() <= 1e-6 * (1.0 + x0.iter().fold(0.0f64, |m, v| m.max(v.abs())))));
        let back = ddim_step(&xt, 900, 0, &eps, &s).unwrap();
        let expect = forward_noise(&x0, 0, &eps, &s).unwrap().x;
        assert!((back - expect).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn same_t_is_identity_and_backwards_rejected() {
        let (s, x, eps) = data();
        assert_eq!(ddim_step(&x, 10, 10, &eps, &s).unwrap(), x);
        assert!(ddim_step(&x, 10, 11, &eps, &s).is_err());
    }

    #[test]
    fn guidance_examples() {
        let (_, u, c) = data();
        assert!((cfg_combine(&u, &c, 1.0).unwrap() - &c).iter().all(|d| d.abs() < 1e-14));
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let zero = Array2::zeros(c.dim());
        assert!((cfg_combine(&zero, &c, 7.5).unwrap() - &c * 7.5).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn thirty_steps_from_thousand() {
        let ts = ddim_timesteps(1000, 30).unwrap();
        assert_eq!(ts.len(), 31);
        assert_eq!((ts[0], ts[30]), (1000, 0));
        // oracle: k * 1000 / 30 rounded, descending
        let oracle: Vec<usize> = (0..=30).rev().map(|k| ((k * 1000) as f64 / 30.0).round() as usize).collect();
        assert_eq!(ts, oracle);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(ddim_timesteps(10, 11).is_err());
    }
}
