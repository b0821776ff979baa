//! Mask representations at pixel, patch and latent resolution.
//!
//! A [`BinaryMask`] holds 1 for keep/visible pixels and 0 for dropped ones.
//! [`rebinarize_patches`] makes it uniform within every `P x P` patch,
//! [`flatten_patch_mask`] expands the per-patch decision bits to the width of
//! the token projection, and [`derive_latent_mask`] pools the pixel mask down
//! to the query grid of the noise latent.

use ndarray::Array2;

use crate::error::{config, validation, Result};
use crate::pnm::PnmImage;
use crate::real::Real;

/// Pixel-resolution keep/drop mask, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(config("mask dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(validation(format!(
                "mask has {} values, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        if let Some(pos) = values.iter().position(|&v| v > 1) {
            return Err(validation(format!(
                "mask value {} at index {pos} is not binary",
                values[pos]
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..height * width)
            .map(|i| u8::from(f(i / width, i % width)))
            .collect();
        Self { height, width, values }
    }

    pub fn filled(height: usize, width: usize, bit: bool) -> Self {
        Self { height, width, values: vec![u8::from(bit); height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn count_zeros(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }

    pub fn mirrored_horizontally(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c) == 1)
    }

    pub fn mirrored_vertically(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c) == 1)
    }

    /// Grayscale conversion: pixel >= 128 maps to 1.
    pub fn from_pnm(img: &PnmImage) -> Result<Self> {
        if img.channels != 1 {
            return Err(validation("masks must be single-channel PGM images"));
        }
        Ok(Self::from_fn(img.height, img.width, |r, c| img.data[r * img.width + c] >= 128))
    }

    /// Writes 0 and 255 only.
    pub fn to_pnm(&self) -> PnmImage {
        let data = self.values.iter().map(|&v| v * 255).collect();
        PnmImage::new(self.width, self.height, 1, data).expect("consistent mask buffer")
    }
}

/// A mask that is constant inside every `patch_size x patch_size` block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    mask: BinaryMask,
    patch_size: usize,
}

impl PatchMask {
    /// Wraps a mask that is already patch-uniform.
    pub fn from_uniform(mask: BinaryMask, patch_size: usize) -> Result<Self> {
        check_divisible(mask.height, mask.width, patch_size, "patch size")?;
        let pm = Self { mask, patch_size };
        let gw = pm.grid_width();
        for (k, bit) in pm.patch_bits().into_iter().enumerate() {
            let (pr, pc) = (k / gw, k % gw);
            for r in 0..patch_size {
                for c in 0..patch_size {
                    if pm.mask.get(pr * patch_size + r, pc * patch_size + c) != bit {
                        return Err(validation(format!("patch {k} is not uniform")));
                    }
                }
            }
        }
        Ok(pm)
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    pub fn into_mask(self) -> BinaryMask {
        self.mask
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn grid_height(&self) -> usize {
        self.mask.height / self.patch_size
    }

    pub fn grid_width(&self) -> usize {
        self.mask.width / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    /// Decision bit of every patch, enumerated row-major.
    pub fn patch_bits(&self) -> Vec<u8> {
        let p = self.patch_size;
        (0..self.n_patches())
            .map(|k| self.mask.get((k / self.grid_width()) * p, (k % self.grid_width()) * p))
            .collect()
    }

    /// The mask reshaped to `N x (P*P*channels)`, matching the flattening of
    /// [`crate::patch_encoder::patchify`]: pixel-major, channel-minor.
    pub fn broadcast<T: Real>(&self, channels: usize) -> Array2<T> {
        let p = self.patch_size;
        let gw = self.grid_width();
        Array2::from_shape_fn((self.n_patches(), p * p * channels), |(k, j)| {
            let pix = j / channels;
            let (r, c) = ((k / gw) * p + pix / p, (k % gw) * p + pix % p);
            if self.mask.get(r, c) == 1 {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Per-patch decision bits padded to the projection width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatPatchMask {
    rows: usize,
    cols: usize,
    row_bits: Vec<u8>,
}

impl FlatPatchMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_bit(&self, row: usize) -> u8 {
        self.row_bits[row]
    }

    pub fn get(&self, row: usize, _col: usize) -> u8 {
        self.row_bits[row]
    }

    pub fn to_array<T: Real>(&self) -> Array2<T> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, _)| {
            if self.row_bits[i] == 1 {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Mask on the latent query grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
    factor: usize,
}

impl LatentMask {
    /// Builds a latent mask directly on the query grid.
    pub fn new(height: usize, width: usize, values: Vec<u8>, factor: usize) -> Result<Self> {
        let m = BinaryMask::new(height, width, values)?;
        Ok(Self { height, width, values: m.values, factor })
    }

    pub fn filled(height: usize, width: usize, bit: bool, factor: usize) -> Self {
        Self { height, width, values: vec![u8::from(bit); height * width], factor }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same-shaped mask with every bit set to `bit`.
    pub fn with_all(&self, bit: bool) -> Self {
        Self::filled(self.height, self.width, bit, self.factor)
    }

    /// Mask values as a gating vector over the row-major query positions.
    pub fn gate<T: Real>(&self) -> Vec<T> {
        self.values.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect()
    }

    /// Nearest-neighbour upsampling back to pixel resolution.
    pub fn to_pixel_mask(&self) -> BinaryMask {
        let f = self.factor.max(1);
        BinaryMask::from_fn(self.height * f, self.width * f, |r, c| self.get(r / f, c / f) == 1)
    }
}

fn check_divisible(height: usize, width: usize, by: usize, what: &str) -> Result<()> {
    if by == 0 {
        return Err(config(format!("{what} must be positive")));
    }
    if !height.is_multiple_of(by) || !width.is_multiple_of(by) {
        return Err(config(format!(
            "mask {height}x{width} is not divisible by {what} {by}"
        )));
    }
    Ok(())
}

/// Majority-vote zero threshold for a `P x P` patch: `ceil(P^2 / 2)`.
pub fn default_zero_threshold(patch_size: usize) -> usize {
    (patch_size * patch_size).div_ceil(2)
}

/// Re-binarizes `mask` at patch granularity.
///
/// A patch whose zero count exceeds `zero_threshold` becomes all zeros,
/// every other patch becomes all ones.
pub fn rebinarize_patches(mask: &BinaryMask, patch_size: usize, zero_threshold: usize) -> Result<PatchMask> {
    check_divisible(mask.height, mask.width, patch_size, "patch size")?;
    if zero_threshold > patch_size * patch_size {
        return Err(config(format!(
            "zero threshold {zero_threshold} exceeds patch area {}",
            patch_size * patch_size
        )));
    }
    let p = patch_size;
    let (gh, gw) = (mask.height / p, mask.width / p);
    let mut zeros = vec![0usize; gh * gw];
    for r in 0..mask.height {
        let row = &mask.values[r * mask.width..(r + 1) * mask.width];
        for (c, &v) in row.iter().enumerate() {
            if v == 0 {
                zeros[(r / p) * gw + c / p] += 1;
            }
        }
    }
    let out = BinaryMask::from_fn(mask.height, mask.width, |r, c| zeros[(r / p) * gw + c / p] <= zero_threshold);
    Ok(PatchMask { mask: out, patch_size })
}

/// Expands each patch's decision bit across a row of width `proj_size`.
pub fn flatten_patch_mask(patch_mask: &PatchMask, proj_size: usize) -> Result<FlatPatchMask> {
    if proj_size == 0 {
        return Err(config("projection size must be at least 1"));
    }
    // PatchMask is patch-uniform by construction, so the corner pixel is the patch bit
    let row_bits = patch_mask.patch_bits();
    Ok(FlatPatchMask { rows: row_bits.len(), cols: proj_size, row_bits })
}

/// Downsamples `mask` by `factor`: a latent cell is 1 iff the mean of its
/// `factor x factor` pixel block is at least `vote_threshold`.
pub fn derive_latent_mask(mask: &BinaryMask, factor: usize, vote_threshold: f64) -> Result<LatentMask> {
    check_divisible(mask.height, mask.width, factor, "latent factor")?;
    if !(vote_threshold > 0.0 && vote_threshold <= 1.0) {
        return Err(config(format!("vote threshold {vote_threshold} outside (0, 1]")));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let area = (factor * factor) as f64;
    let values = (0..h * w)
        .map(|k| {
            let (lr, lc) = (k / w, k % w);
            let mut ones = 0usize;
            for r in 0..factor {
                for c in 0..factor {
                    ones += mask.get(lr * factor + r, lc * factor + c) as usize;
                }
            }
            u8::from(ones as f64 / area >= vote_threshold)
        })
        .collect();
    Ok(LatentMask { height: h, width: w, values, factor })
}
