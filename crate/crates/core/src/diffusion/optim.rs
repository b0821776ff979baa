//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::{ParamInfo, Parameters, Section};
use crate::error::{config, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config("weight decay must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(config("eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new<P: Parameters<T>>(config: AdamWConfig, params: &P) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<T>> = params.param_slices().iter().map(|s| vec![T::zero(); s.len()]).collect();
        Ok(Self { config, step: 0, m: zeros.clone(), v: zeros })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen tensors are left untouched.
    pub fn update<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (step_size, decay) = (T::lit(c.lr / bc1), T::lit(c.lr * c.weight_decay));
        let (sqrt_bc2, eps) = (T::lit(bc2.sqrt()), T::lit(c.eps));
        let infos = params.param_infos();
        for (((p, g), (m, v)), info) in params
            .param_slices_mut()
            .into_iter()
            .zip(grads.param_slices())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(&infos)
        {
            if info.frozen || c.lr == 0.0 {
                continue;
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let denom = v[i].sqrt() / sqrt_bc2 + eps;
                p[i] = p[i] - decay * p[i] - step_size * m[i] / denom;
            }
        }
    }

    /// Moment buffers as named tensors in the optimizer section.
    pub fn state_infos(&self, params: &[ParamInfo]) -> Vec<ParamInfo> {
        let mut out = Vec::with_capacity(2 * params.len());
        for kind in ["m", "v"] {
            out.extend(params.iter().map(|p| ParamInfo {
                name: format!("adamw.{kind}.{}", p.name),
                shape: p.shape.clone(),
                frozen: false,
                section: Section::Optimizer,
            }));
        }
        out
    }

    pub fn state_slices(&self) -> Vec<&[T]> {
        self.m.iter().chain(&self.v).map(|b| b.as_slice()).collect()
    }

    /// Restores step count and moments; `state` must follow [`AdamW::state_slices`] order.
    pub fn restore(&mut self, step: u64, state: Vec<Vec<T>>) -> Result<()> {
        let n = self.m.len();
        if state.len() != 2 * n {
            return Err(config(format!("optimizer state has {} tensors, expected {}", state.len(), 2 * n)));
        }
        for (i, s) in state.iter().enumerate() {
            let expected = if i < n { self.m[i].len() } else { self.v[i - n].len() };
            if s.len() != expected {
                return Err(config(format!("optimizer tensor {i} has {} values, expected {expected}", s.len())));
            }
        }
        let mut it = state.into_iter();
        self.m = it.by_ref().take(n).collect();
        self.v = it.collect();
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Vector(Vec<f64>, bool);

    impl Parameters<f64> for Vector {
        fn param_infos(&self) -> Vec<ParamInfo> {
            vec![ParamInfo { name: "x".into(), shape: vec![self.0.len()], frozen: self.1, section: Section::Denoiser }]
        }
        fn param_slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut p = Vector(vec![1.0, -2.0, 0.5], false);
        let g = Vector(vec![3.0, -0.01, 0.0], false);
        let mut opt = AdamW::new(cfg, &p).unwrap();
        opt.update(&mut p, &g);
        assert!((p.0[0] - 0.9).abs() < 1e-6);
        assert!((p.0[1] + 1.9).abs() < 1e-4);
        assert_eq!(p.0[2], 0.5);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = Vector(vec![2.0], false);
        let mut opt = AdamW::new(cfg, &p).unwrap();
        opt.update(&mut p, &Vector(vec![0.0], false));
        assert!((p.0[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_zero_lr_are_bit_identical() {
        let mut p = Vector(vec![1.25, -3.5], true);
        let mut opt = AdamW::new(AdamWConfig::default(), &p).unwrap();
        opt.update(&mut p, &Vector(vec![1.0, 1.0], false));
        assert_eq!(p.0, vec![1.25, -3.5]);
        let mut q = Vector(vec![1.25, -3.5], false);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &q).unwrap();
        opt.update(&mut q, &Vector(vec![1.0, 1.0], false));
        assert_eq!(q.0, vec![1.25, -3.5]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut p = Vector(vec![3.0, -4.0], false);
        let mut opt = AdamW::new(cfg, &p).unwrap();
        for _ in 0..2000 {
            let g = Vector(p.0.iter().map(|x| 2.0 * x).collect(), false);
            opt.update(&mut p, &g);
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamWConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
    }
}
