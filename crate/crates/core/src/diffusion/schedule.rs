//! Variance-preserving noise schedule and forward noising.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::real::Real;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    LinearBeta,
}

/// `alpha_t`, `sigma_t` for `t = 0..=T` with `alpha_t^2 + sigma_t^2 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of training steps `T`; valid timesteps are `0..=T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(validation(format!("timestep {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }
}

/// Linear betas in `[1e-4, 0.02]` over `t = 0..=T`;
/// `alpha_t = sqrt(prod_{s<=t} (1 - beta_s))`, `sigma_t = sqrt(1 - alpha_t^2)`.
pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(config("schedule needs at least one step"));
    }
    let mut alpha = Vec::with_capacity(steps + 1);
    let mut sigma = Vec::with_capacity(steps + 1);
    let mut cumprod = 1.0;
    for t in 0..=steps {
        let beta = match kind {
            ScheduleKind::LinearBeta => BETA_START + (BETA_END - BETA_START) * t as f64 / steps as f64,
        };
        cumprod *= 1.0 - beta;
        alpha.push(cumprod.sqrt());
        sigma.push((1.0 - cumprod).sqrt());
    }
    Ok(NoiseSchedule { kind, alpha, sigma })
}

/// A latent on the `grid_height x grid_width` grid, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub x: Array2<T>,
    pub t: usize,
}

/// `x_t = alpha_t x0 + sigma_t eps`.
pub fn forward_noise<T: Real>(x0: &Array2<T>, t: usize, eps: &Array2<T>, schedule: &NoiseSchedule) -> Result<LatentState<T>> {
    schedule.check_t(t)?;
    if x0.dim() != eps.dim() {
        return Err(validation(format!("noise shape {:?} does not match latent {:?}", eps.dim(), x0.dim())));
    }
    let (a, s) = (T::lit(schedule.alpha(t)), T::lit(schedule.sigma(t)));
    let mut x = x0 * a;
    x.scaled_add(s, eps);
    Ok(LatentState { x, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch_encoder::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn t_zero_values() {
        let s = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        assert!((s.alpha(0) - (1.0f64 - 1e-4).sqrt()).abs() < 1e-15);
        assert!((s.sigma(0) - 1e-4f64.sqrt()).abs() < 1e-12);
        assert!((s.alpha(0) - 0.99995).abs() < 1e-6);
    }

    #[test]
    fn variance_preserving_and_monotone() {
        let s = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        for t in 0..=1000 {
            assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() <= 1e-9);
            if t > 0 {
                assert!(s.alpha(t) <= s.alpha(t - 1));
            }
        }
    }

    #[test]
    fn terminal_alpha_below_tenth() {
        let s = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        // independent product evaluation
        let prod: f64 = (0..=1000).map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 1000.0)).product();
        assert!((s.alpha(1000) - prod.sqrt()).abs() < 1e-12);
        assert!(s.alpha(1000) < 0.1);
    }

    #[test]
    fn rejects_zero_steps() {
        assert!(matches!(build_schedule(0, ScheduleKind::LinearBeta), Err(crate::Error::Config(_))));
    }

    #[test]
    fn forward_noise_examples() {
        let s = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0: Array2<f64> = random_matrix(6, 3, 1.0, &mut rng);
        let eps: Array2<f64> = random_matrix(6, 3, 1.0, &mut rng);
        let zero = Array2::zeros((6, 3));
        assert_eq!(forward_noise(&x0, 300, &zero, &s).unwrap().x, &x0 * s.alpha(300));
        assert_eq!(forward_noise(&zero, 300, &eps, &s).unwrap().x, &eps * s.sigma(300));
        let xt = forward_noise(&x0, 500, &eps, &s).unwrap();
        for ((a, b), c) in x0.iter().zip(eps.iter()).zip(xt.x.iter()) {
            assert!((s.alpha(500) * a + s.sigma(500) * b - c).abs() < 1e-15);
        }
        assert!(forward_noise(&x0, 1001, &eps, &s).is_err());
        assert!(forward_noise(&x0, 5, &Array2::zeros((2, 3)), &s).is_err());
    }
}
