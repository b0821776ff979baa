//! Deterministic synthetic scenes: a flat-colored disc or square "product"
//! over a lightly textured background, with its mask and prompt tokens.
//!
//! Text tokens carry the background color. The reference image handed to the
//! image prompt is a patchwork: foreground color on patches the mask keeps,
//! random distractor colors elsewhere, so only the masked projection of the
//! reference reveals the product color.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::conditioning::{Conditioning, MaskSettings};
use crate::diffusion::train::{sample_seed, TrainingExample};
use crate::diffusion::LatentCodec;
use crate::error::{config, validation, Error, Result};
use crate::mask_ops::{rebinarize_patches, BinaryMask};
use crate::parallel::{try_map_indexed, Execution};
use crate::patch_encoder::{patchify, ImageTensor};
use crate::pnm::PnmImage;
use crate::real::Real;

pub type Rgb = [f64; 3];

const TEXT_EMBED_SEED: u64 = 0x7E47_5EED;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    /// Center in pixels, `(row, col)`.
    pub center: (f64, f64),
    /// Disc radius or square half-side, in pixels.
    pub extent: f64,
    pub fg_color: Rgb,
    pub bg_color: Rgb,
    pub texture_amplitude: f64,
    pub size: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Random spec for scene `index` of a dataset seeded with `seed`.
    pub fn random(seed: u64, index: u64, size: usize, patch_size: usize) -> Self {
        let scene_seed = sample_seed(seed, u64::MAX, index);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let s = size as f64;
        let shape = if rng.random_bool(0.5) { Shape::Disc } else { Shape::Square };
        let center = (rng.random_range(0.25..0.75) * s, rng.random_range(0.25..0.75) * s);
        let extent = rng.random_range(0.2..0.45) * s;
        let fg_color = random_color(&mut rng);
        let bg_color = random_color(&mut rng);
        let texture_amplitude = rng.random_range(0.0..0.1);
        Self { shape, center, extent, fg_color, bg_color, texture_amplitude, size, patch_size, seed: scene_seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.patch_size == 0 {
            return Err(config("scene size and patch size must be positive"));
        }
        if !self.size.is_multiple_of(self.patch_size) {
            return Err(config(format!("scene size {} not divisible by patch size {}", self.size, self.patch_size)));
        }
        for c in self.fg_color.iter().chain(&self.bg_color) {
            if !(0.0..=1.0).contains(c) {
                return Err(config(format!("color component {c} outside [0, 1]")));
            }
        }
        if !(self.extent >= 0.0 && self.texture_amplitude >= 0.0) {
            return Err(config("extent and texture amplitude must be non-negative"));
        }
        Ok(())
    }

    /// True when pixel `(row, col)` belongs to the foreground shape.
    pub fn is_foreground(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.center.0;
        let dx = col as f64 + 0.5 - self.center.1;
        match self.shape {
            Shape::Disc => dy * dy + dx * dx < self.extent * self.extent,
            Shape::Square => dy.abs() < self.extent && dx.abs() < self.extent,
        }
    }

    pub fn mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.size, self.size, |r, c| self.is_foreground(r, c))
    }
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[0, 1]` RGB to the `[-1, 1]` image range.
pub fn color_to_signed(c: Rgb) -> Rgb {
    c.map(|v| 2.0 * v - 1.0)
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub spec: SceneSpec,
    pub image: ImageTensor<T>,
    pub mask: BinaryMask,
    /// `2 x d_ctx` text prompt tokens.
    pub text_tokens: Array2<T>,
    pub reference: ImageTensor<T>,
    /// Patchified reference, `N x (P^2 C)`.
    pub image_tokens: Array2<T>,
}

/// Two text tokens: the background color on a fixed embedding, then a constant start token.
pub fn text_tokens<T: Real>(color: Rgb, d_ctx: usize) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEXT_EMBED_SEED);
    let embed = Array2::<f64>::from_shape_simple_fn((4, d_ctx), || rng.sample(StandardNormal));
    let c = color_to_signed(color);
    Array2::from_shape_fn((2, d_ctx), |(k, j)| {
        let v = if k == 0 { (0..3).map(|i| c[i] * embed[[i, j]]).sum() } else { embed[[3, j]] };
        T::lit(v)
    })
}

/// Foreground color on kept patches, a random color per dropped patch.
pub fn reference_patchwork<T: Real>(fg_color: Rgb, mask: &BinaryMask, patch_size: usize, seed: u64) -> Result<ImageTensor<T>> {
    let tau = crate::mask_ops::default_zero_threshold(patch_size);
    let pm = rebinarize_patches(mask, patch_size, tau)?;
    let bits = pm.patch_bits();
    let gw = pm.grid_width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5);
    let colors: Vec<Rgb> = bits.iter().map(|&b| if b == 1 { fg_color } else { random_color(&mut rng) }).collect();
    let raster: Vec<u8> = (0..mask.height() * mask.width() * 3)
        .map(|i| {
            let (r, c, ch) = (i / (mask.width() * 3), (i / 3) % mask.width(), i % 3);
            quantize(colors[(r / patch_size) * gw + c / patch_size][ch])
        })
        .collect();
    Ok(ImageTensor::from_pnm(&PnmImage::new(mask.width(), mask.height(), 3, raster)?))
}

/// Renders the scene image as 8-bit RGB.
pub fn render(spec: &SceneSpec) -> Result<PnmImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let mut raster = Vec::with_capacity(n * n * 3);
    for r in 0..n {
        for c in 0..n {
            let fg = spec.is_foreground(r, c);
            for ch in 0..3 {
                let noise: f64 = rng.random_range(-1.0..1.0);
                let v = if fg { spec.fg_color[ch] } else { spec.bg_color[ch] + spec.texture_amplitude * noise };
                raster.push(quantize(v));
            }
        }
    }
    PnmImage::new(n, n, 3, raster)
}

pub fn generate_scene<T: Real>(spec: &SceneSpec, d_ctx: usize) -> Result<Scene<T>> {
    let image = ImageTensor::from_pnm(&render(spec)?);
    scene_from_parts(spec, image, spec.mask(), d_ctx)
}

fn scene_from_parts<T: Real>(spec: &SceneSpec, image: ImageTensor<T>, mask: BinaryMask, d_ctx: usize) -> Result<Scene<T>> {
    let reference = reference_patchwork(spec.fg_color, &mask, spec.patch_size, spec.seed)?;
    let image_tokens = patchify(&reference, spec.patch_size)?.into_values();
    Ok(Scene { spec: *spec, image, mask, text_tokens: text_tokens(spec.bg_color, d_ctx), reference, image_tokens })
}

impl<T: Real> Scene<T> {
    /// Encodes the image and builds masked-mode conditioning.
    pub fn to_example(&self, codec: &LatentCodec, settings: &MaskSettings) -> Result<TrainingExample<T>> {
        Ok(TrainingExample {
            x0: codec.encode(&self.image)?,
            cond: Conditioning::build(self.text_tokens.clone(), &self.reference, &self.mask, settings)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    pub patch_size: usize,
    pub scenes: Vec<ManifestEntry>,
}

fn scene_paths(index: usize) -> (String, String) {
    (format!("scene_{index:05}.ppm"), format!("scene_{index:05}_mask.pgm"))
}

/// Writes `n` scenes plus `manifest.json` into `dir`.
pub fn generate_dataset(dir: &Path, n: usize, seed: u64, size: usize, patch_size: usize, exec: Execution) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(config("dataset needs at least one scene"));
    }
    let probe = SceneSpec::random(seed, 0, size, patch_size);
    probe.validate()?;
    fs::create_dir_all(dir)?;
    let scenes = try_map_indexed(exec, n, |i| {
        let spec = SceneSpec::random(seed, i as u64, size, patch_size);
        let (image, mask) = scene_paths(i);
        render(&spec)?.write(dir.join(&image))?;
        spec.mask().to_pnm().write(dir.join(&mask))?;
        Ok::<_, Error>(ManifestEntry { index: i, image, mask, spec })
    })?;
    let manifest = DatasetManifest { n, seed, size, patch_size, scenes };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path(dir))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every scene listed in the manifest; prompt tokens are regenerated from the specs.
pub fn load_dataset<T: Real>(dir: &Path, d_ctx: usize, exec: Execution) -> Result<Vec<Scene<T>>> {
    let manifest = read_manifest(dir)?;
    try_map_indexed(exec, manifest.scenes.len(), |i| {
        let e = &manifest.scenes[i];
        let img = PnmImage::read(dir.join(&e.image))?;
        let mask = BinaryMask::from_pnm(&PnmImage::read(dir.join(&e.mask))?)?;
        if img.channels != 3 || (img.height, img.width) != (e.spec.size, e.spec.size) {
            return Err(validation(format!("{} does not match its manifest entry", e.image)));
        }
        scene_from_parts(&e.spec, ImageTensor::from_pnm(&img), mask, d_ctx)
    })
}

/// Generates `n` scenes in memory, no files involved.
pub fn generate_scenes<T: Real>(n: usize, seed: u64, size: usize, patch_size: usize, d_ctx: usize, exec: Execution) -> Result<Vec<Scene<T>>> {
    try_map_indexed(exec, n, |i| generate_scene(&SceneSpec::random(seed, i as u64, size, patch_size), d_ctx))
}
