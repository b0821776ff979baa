//! Conditioning bundles and the training-time conditioning dropout.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Result};
use crate::mask_ops::{derive_latent_mask, rebinarize_patches, BinaryMask, LatentMask, PatchMask};
use crate::patch_encoder::{patchify, ImageTensor};
use crate::real::Real;

/// Which attention path the denoiser takes for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    /// Image prompt replaced by the learned null token, latent mask all zeros.
    TextOnly,
    /// Mask-routed cross-attention.
    Masked,
    /// Dual cross-attention, every query sees both prompts.
    Unmasked,
}

/// Everything the denoiser is conditioned on for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning<T> {
    /// Text prompt tokens, `n_text x d_ctx`.
    pub text: Array2<T>,
    /// Patchified reference image, `N x (P^2 C)`.
    pub reference: Array2<T>,
    /// Patch-level keep mask applied to the reference.
    pub patch_mask: PatchMask,
    /// Query routing mask on the latent grid.
    pub latent_mask: LatentMask,
    pub mode: ConditioningMode,
}

/// Mask preparation settings shared by training and sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSettings {
    pub patch_size: usize,
    pub zero_threshold: usize,
    pub latent_factor: usize,
    pub vote_threshold: f64,
}

impl<T: Real> Conditioning<T> {
    /// Builds a masked-mode conditioning from raw inputs.
    pub fn build(text: Array2<T>, reference: &ImageTensor<T>, mask: &BinaryMask, settings: &MaskSettings) -> Result<Self> {
        if (reference.height(), reference.width()) != (mask.height(), mask.width()) {
            return Err(validation("reference image and mask sizes differ"));
        }
        if text.nrows() == 0 {
            return Err(validation("text prompt needs at least one token"));
        }
        let patch_mask = rebinarize_patches(mask, settings.patch_size, settings.zero_threshold)?;
        let latent_mask = derive_latent_mask(mask, settings.latent_factor, settings.vote_threshold)?;
        let reference = patchify(reference, settings.patch_size)?.into_values();
        Ok(Self { text, reference, patch_mask, latent_mask, mode: ConditioningMode::Masked })
    }

    pub fn with_mode(&self, mode: ConditioningMode) -> Self {
        let mut c = self.clone();
        c.mode = mode;
        if mode == ConditioningMode::TextOnly {
            c.latent_mask = c.latent_mask.with_all(false);
        }
        c
    }

    /// The branch used as the unconditional prediction for guidance.
    pub fn unconditional(&self) -> Self {
        self.with_mode(ConditioningMode::TextOnly)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent_mask.height(), self.latent_mask.width())
    }
}

/// Training-time prompt dropout probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningDropout {
    pub p_text_only: f64,
    pub p_mask_applied: f64,
}

impl Default for ConditioningDropout {
    fn default() -> Self {
        Self { p_text_only: 0.05, p_mask_applied: 0.5 }
    }
}

impl ConditioningDropout {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_text_only", self.p_text_only), ("p_mask_applied", self.p_mask_applied)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Maps two independent uniform draws to a mode.
    pub fn decide(&self, draw: (f64, f64)) -> ConditioningMode {
        if draw.0 < self.p_text_only {
            ConditioningMode::TextOnly
        } else if draw.1 < self.p_mask_applied {
            ConditioningMode::Masked
        } else {
            ConditioningMode::Unmasked
        }
    }
}

pub fn apply_conditioning_dropout<T: Real>(cond: &Conditioning<T>, dropout: &ConditioningDropout, draw: (f64, f64)) -> Conditioning<T> {
    cond.with_mode(dropout.decide(draw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond() -> Conditioning<f64> {
        let mask = BinaryMask::from_fn(8, 8, |_, c| c < 4);
        let img = ImageTensor::from_fn(8, 8, 3, |_, _, _| 0.1);
        let settings = MaskSettings { patch_size: 4, zero_threshold: 8, latent_factor: 2, vote_threshold: 0.5 };
        Conditioning::build(Array2::ones((2, 5)), &img, &mask, &settings).unwrap()
    }

    #[test]
    fn draw_thresholds() {
        let d = ConditioningDropout::default();
        assert_eq!(d.decide((0.01, 0.0)), ConditioningMode::TextOnly);
        assert_eq!(d.decide((0.9, 0.3)), ConditioningMode::Masked);
        assert_eq!(d.decide((0.9, 0.8)), ConditioningMode::Unmasked);
        assert_eq!(d.decide((0.05, 0.5)), ConditioningMode::Unmasked);
    }

    #[test]
    fn text_only_zeroes_latent_mask() {
        let c = cond();
        assert!(c.latent_mask.values().contains(&1));
        let t = apply_conditioning_dropout(&c, &ConditioningDropout::default(), (0.0, 0.0));
        assert_eq!(t.mode, ConditioningMode::TextOnly);
        assert!(t.latent_mask.values().iter().all(|&v| v == 0));
        let u = apply_conditioning_dropout(&c, &ConditioningDropout::default(), (0.5, 0.9));
        assert_eq!(u.latent_mask, c.latent_mask);
    }

    #[test]
    fn build_shapes() {
        let c = cond();
        assert_eq!(c.reference.dim(), (4, 48));
        assert_eq!(c.grid(), (4, 4));
        assert_eq!(c.patch_mask.patch_bits(), vec![1, 0, 1, 0]);
    }

    #[test]
    fn invalid_probabilities() {
        assert!(ConditioningDropout { p_text_only: 1.5, p_mask_applied: 0.5 }.validate().is_err());
    }
}
