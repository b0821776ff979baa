//! Fixed stride-`f` encoder/decoder pair standing in for a VAE.
//!
//! Encoding averages each `f x f` pixel block per channel (a box-filter
//! convolution with stride `f`); decoding repeats each latent cell over its
//! block (the matching transposed convolution) and clamps to `[-1, 1]`.

use ndarray::Array2;

use crate::error::{config, Result};
use crate::patch_encoder::ImageTensor;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub factor: usize,
}

impl LatentCodec {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(config("latent factor must be positive"));
        }
        Ok(Self { factor })
    }

    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.factor) || !width.is_multiple_of(self.factor) {
            return Err(config(format!("image {height}x{width} not divisible by latent factor {}", self.factor)));
        }
        Ok((height / self.factor, width / self.factor))
    }

    /// `(h' w') x C` latent, one row per latent cell.
    pub fn encode<T: Real>(&self, image: &ImageTensor<T>) -> Result<Array2<T>> {
        let (gh, gw) = self.grid(image.height(), image.width())?;
        let f = self.factor;
        let norm = T::lit((f * f) as f64);
        Ok(Array2::from_shape_fn((gh * gw, image.channels()), |(k, ch)| {
            let (lr, lc) = (k / gw, k % gw);
            let mut acc = T::zero();
            for r in 0..f {
                for c in 0..f {
                    acc += image.get(lr * f + r, lc * f + c, ch);
                }
            }
            acc / norm
        }))
    }

    pub fn decode<T: Real>(&self, latent: &Array2<T>, grid_height: usize, grid_width: usize) -> ImageTensor<T> {
        let f = self.factor;
        let lo = -T::one();
        ImageTensor::from_fn(grid_height * f, grid_width * f, latent.ncols(), |r, c, ch| {
            latent[[(r / f) * grid_width + c / f, ch]].max(lo).min(T::one())
        })
    }
}
