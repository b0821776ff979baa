//! Patchification, masked patch projection and learned-query token compression.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, validation, Result};
use crate::mask_ops::{FlatPatchMask, PatchMask};
use crate::pnm::PnmImage;
use crate::real::Real;

/// An `H x W x C` image with values normalized to `[-1, 1]`, stored HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(config("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(validation(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(validation("image contains non-finite values"));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let data = (0..height * width * channels)
            .map(|i| f(i / (width * channels), (i / channels) % width, i % channels))
            .collect();
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// `v -> 2 v / 255 - 1`.
    pub fn from_pnm(img: &PnmImage) -> Self {
        let data = img.data.iter().map(|&v| T::lit(2.0 * v as f64 / 255.0 - 1.0)).collect();
        Self { height: img.height, width: img.width, channels: img.channels, data }
    }

    /// Inverse of [`ImageTensor::from_pnm`], rounded and clamped to `[0, 255]`.
    pub fn to_pnm(&self) -> Result<PnmImage> {
        let data = self
            .data
            .iter()
            .map(|v| ((v.to_f64_lossy() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        PnmImage::new(self.width, self.height, self.channels, data)
    }

    /// Mean of each channel over pixels where `select(row, col)` holds.
    pub fn masked_channel_mean(&self, select: impl Fn(usize, usize) -> bool) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.channels];
        let mut n = 0usize;
        for r in 0..self.height {
            for c in 0..self.width {
                if select(r, c) {
                    n += 1;
                    for (ch, s) in sum.iter_mut().enumerate() {
                        *s += self.get(r, c, ch).to_f64_lossy();
                    }
                }
            }
        }
        (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
    }
}

/// Flattened patches, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence<T> {
    patch_size: usize,
    channels: usize,
    grid_height: usize,
    grid_width: usize,
    values: Array2<T>,
}

impl<T: Real> PatchSequence<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.values
    }

    pub fn into_values(self) -> Array2<T> {
        self.values
    }

    pub fn n_patches(&self) -> usize {
        self.values.nrows()
    }

    pub fn patch_dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }
}

/// Splits the image into `P x P` patches enumerated row-major; each row holds
/// the patch pixels row-major with channels innermost.
pub fn patchify<T: Real>(image: &ImageTensor<T>, patch_size: usize) -> Result<PatchSequence<T>> {
    if patch_size == 0 || !image.height.is_multiple_of(patch_size) || !image.width.is_multiple_of(patch_size) {
        return Err(config(format!(
            "image {}x{} is not divisible by patch size {patch_size}",
            image.height, image.width
        )));
    }
    let p = patch_size;
    let c = image.channels;
    let (gh, gw) = (image.height / p, image.width / p);
    let values = Array2::from_shape_fn((gh * gw, p * p * c), |(k, j)| {
        let pix = j / c;
        image.get((k / gw) * p + pix / p, (k % gw) * p + pix % p, j % c)
    });
    Ok(PatchSequence { patch_size: p, channels: c, grid_height: gh, grid_width: gw, values })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(seq: &PatchSequence<T>) -> ImageTensor<T> {
    let p = seq.patch_size;
    let c = seq.channels;
    let gw = seq.grid_width;
    ImageTensor::from_fn(seq.grid_height * p, gw * p, c, |r, col, ch| {
        let k = (r / p) * gw + col / p;
        let pix = (r % p) * p + col % p;
        seq.values[[k, pix * c + ch]]
    })
}

/// Linear patch projection `(P^2 C) -> proj_size` with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> ProjectionWeights<T> {
    pub fn new(weight: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(validation("projection bias length must equal weight columns"));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(validation("projection weights must be finite"));
        }
        Ok(Self { weight, bias })
    }

    /// Gaussian init with standard deviation `1 / sqrt(patch_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(patch_dim: usize, proj_size: usize, rng: &mut R) -> Self {
        Self {
            weight: random_matrix(patch_dim, proj_size, 1.0 / (patch_dim as f64).sqrt(), rng),
            bias: Array1::zeros(proj_size),
        }
    }

    pub fn proj_size(&self) -> usize {
        self.weight.ncols()
    }
}

/// Token features, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T>(pub Array2<T>);

impl<T: Real> TokenMatrix<T> {
    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn feat_dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Gradients of [`masked_project`] with respect to its real-valued inputs.
#[derive(Debug, Clone)]
pub struct ProjectionGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub patches: Array2<T>,
}

pub(crate) fn random_matrix<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

fn check_projection_shapes<T: Real>(
    patches: &Array2<T>,
    pixel_mask: &Array2<T>,
    w: &ProjectionWeights<T>,
    row_mask: &Array2<T>,
) -> Result<()> {
    if pixel_mask.dim() != patches.dim() {
        return Err(validation(format!(
            "patch mask broadcast {:?} does not match patches {:?}",
            pixel_mask.dim(),
            patches.dim()
        )));
    }
    if w.weight.nrows() != patches.ncols() {
        return Err(validation(format!(
            "projection expects patch dim {}, got {}",
            w.weight.nrows(),
            patches.ncols()
        )));
    }
    if row_mask.dim() != (patches.nrows(), w.proj_size()) {
        return Err(validation(format!(
            "flat mask {:?} does not match {}x{}",
            row_mask.dim(),
            patches.nrows(),
            w.proj_size()
        )));
    }
    Ok(())
}

/// `((patches * D_p) W + b) * D_z` on pre-broadcast mask arrays.
pub fn project_masked_arrays<T: Real>(
    patches: &Array2<T>,
    pixel_mask: &Array2<T>,
    w: &ProjectionWeights<T>,
    row_mask: &Array2<T>,
) -> Result<Array2<T>> {
    check_projection_shapes(patches, pixel_mask, w, row_mask)?;
    let masked = patches * pixel_mask;
    let projected = masked.dot(&w.weight) + &w.bias;
    Ok(projected * row_mask)
}

/// Backward pass of [`project_masked_arrays`].
pub fn project_masked_arrays_backward<T: Real>(
    patches: &Array2<T>,
    pixel_mask: &Array2<T>,
    w: &ProjectionWeights<T>,
    row_mask: &Array2<T>,
    d_out: &Array2<T>,
) -> Result<ProjectionGrads<T>> {
    check_projection_shapes(patches, pixel_mask, w, row_mask)?;
    let g = d_out * row_mask;
    let masked = patches * pixel_mask;
    Ok(ProjectionGrads {
        weight: masked.t().dot(&g),
        bias: g.sum_axis(Axis(0)),
        patches: g.dot(&w.weight.t()) * pixel_mask,
    })
}

/// Masked patch projection: `z = ((I_p * D_p) W + b) * D_z`.
///
/// Rows of dropped patches come out exactly zero, bias included.
pub fn masked_project<T: Real>(
    patches: &PatchSequence<T>,
    patch_mask: &PatchMask,
    w: &ProjectionWeights<T>,
    flat_mask: &FlatPatchMask,
) -> Result<TokenMatrix<T>> {
    if patch_mask.patch_size() != patches.patch_size || patch_mask.grid_height() != patches.grid_height
        || patch_mask.grid_width() != patches.grid_width
    {
        return Err(validation("patch mask grid does not align with the patch sequence"));
    }
    let pixel_mask = patch_mask.broadcast::<T>(patches.channels);
    project_masked_arrays(&patches.values, &pixel_mask, w, &flat_mask.to_array())
        .map(TokenMatrix)
}

/// Learned compression queries, `c x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionQuery<T> {
    pub values: Array2<T>,
    /// Divide the output by the token count. Off by default: the product is
    /// used exactly as `Q Z^T Z`.
    pub scale_by_tokens: bool,
}

impl<T: Real> CompressionQuery<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("compression query must be finite"));
        }
        Ok(Self { values, scale_by_tokens: false })
    }

    pub fn random<R: Rng + ?Sized>(c: usize, feat_dim: usize, std: f64, rng: &mut R) -> Self {
        Self { values: random_matrix(c, feat_dim, std, rng), scale_by_tokens: false }
    }

    pub fn n_queries(&self) -> usize {
        self.values.nrows()
    }
}

fn check_compression<T: Real>(z: &Array2<T>, q: &CompressionQuery<T>) -> Result<()> {
    if q.values.ncols() != z.ncols() {
        return Err(validation(format!(
            "query feature dim {} does not match token dim {}",
            q.values.ncols(),
            z.ncols()
        )));
    }
    if q.values.nrows() >= z.nrows() {
        return Err(config(format!(
            "compressed count c = {} must be smaller than N = {}",
            q.values.nrows(),
            z.nrows()
        )));
    }
    Ok(())
}

fn compression_scale<T: Real>(q: &CompressionQuery<T>, n: usize) -> T {
    if q.scale_by_tokens {
        T::one() / T::lit(n as f64)
    } else {
        T::one()
    }
}

/// Token compression `Z' = Q (Z^T Z)`, shape `c x D`.
pub fn compress_tokens<T: Real>(z: &TokenMatrix<T>, q: &CompressionQuery<T>) -> Result<TokenMatrix<T>> {
    compress_arrays(&z.0, q).map(TokenMatrix)
}

pub fn compress_arrays<T: Real>(z: &Array2<T>, q: &CompressionQuery<T>) -> Result<Array2<T>> {
    check_compression(z, q)?;
    let gram = z.t().dot(z);
    Ok(q.values.dot(&gram) * compression_scale(q, z.nrows()))
}

/// Gradients of [`compress_arrays`]: `(dQ, dZ)`.
pub fn compress_arrays_backward<T: Real>(
    z: &Array2<T>,
    q: &CompressionQuery<T>,
    d_out: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    check_compression(z, q)?;
    let s = compression_scale(q, z.nrows());
    let g = d_out * s;
    let gram = z.t().dot(z);
    let d_q = g.dot(&gram);
    // Z' = (Q Z^T) Z, so dZ = Z Q^T G + Z G^T Q
    let d_z = z.dot(&q.values.t()).dot(&g) + z.dot(&g.t()).dot(&q.values);
    Ok((d_q, d_z))
}
