//! Evaluation over image directories: Fréchet distance on two fixed feature
//! maps, optional IS and MoS inputs, and the region color-agreement score.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::mask_ops::BinaryMask;
use crate::metrics::{accumulate_stats, frechet_distance, inception_score, mean_of_score, ProbMatrix};
use crate::patch_encoder::ImageTensor;
use crate::pnm::PnmImage;

/// Output width of [`projection_features`].
pub const PROJECTION_DIM: usize = 32;
/// Block grid per side used by [`pixel_features`].
pub const PIXEL_GRID: usize = 4;
const PROJECTION_SEED: u64 = 0xFEA7_0E55;

/// Block-averaged pixels on a `PIXEL_GRID x PIXEL_GRID` grid, channel-minor.
pub fn pixel_features(img: &ImageTensor<f64>) -> Vec<f64> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut sums = vec![0.0; PIXEL_GRID * PIXEL_GRID * ch];
    let mut counts = [0usize; PIXEL_GRID * PIXEL_GRID];
    for r in 0..h {
        for c in 0..w {
            let cell = (r * PIXEL_GRID / h) * PIXEL_GRID + c * PIXEL_GRID / w;
            counts[cell] += 1;
            for k in 0..ch {
                sums[cell * ch + k] += img.get(r, c, k);
            }
        }
    }
    sums.iter().enumerate().map(|(i, s)| s / counts[i / ch].max(1) as f64).collect()
}

/// Fixed Gaussian projection of all pixels to [`PROJECTION_DIM`] values.
pub fn projection_features(img: &ImageTensor<f64>) -> Vec<f64> {
    let d = img.data().len();
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ d as u64);
    let scale = 1.0 / (d as f64).sqrt();
    let proj = Array2::from_shape_simple_fn((d, PROJECTION_DIM), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    });
    let x = ndarray::ArrayView1::from(img.data());
    x.dot(&proj).to_vec()
}

fn check_same_shape(a: &[ImageTensor<f64>], b: &[ImageTensor<f64>]) -> Result<()> {
    let shape = |i: &ImageTensor<f64>| (i.height(), i.width(), i.channels());
    let s = shape(&a[0]);
    if a.iter().chain(b).any(|i| shape(i) != s) {
        return Err(validation("all evaluated images must share one shape"));
    }
    Ok(())
}

pub fn frechet_between(a: &[ImageTensor<f64>], b: &[ImageTensor<f64>], features: fn(&ImageTensor<f64>) -> Vec<f64>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(validation("Fréchet distance needs non-empty image sets"));
    }
    check_same_shape(a, b)?;
    let sa = accumulate_stats(a.iter().map(features))?;
    let sb = accumulate_stats(b.iter().map(features))?;
    frechet_distance(&sa, &sb)
}

/// Mean over samples of the mean absolute per-channel difference between the
/// generated and reference masked-region mean colors, in `[0, 1]` units.
pub fn region_color_agreement(generated: &[ImageTensor<f64>], targets: &[ImageTensor<f64>], masks: &[BinaryMask]) -> Result<f64> {
    if generated.is_empty() || generated.len() != targets.len() || generated.len() != masks.len() {
        return Err(validation("region score needs equal, non-empty counts of images, targets and masks"));
    }
    let mut total = 0.0;
    for (i, ((g, t), m)) in generated.iter().zip(targets).zip(masks).enumerate() {
        if (g.height(), g.width()) != (m.height(), m.width()) || (t.height(), t.width()) != (m.height(), m.width()) {
            return Err(validation(format!("sample {i}: image and mask sizes differ")));
        }
        let sel = |r: usize, c: usize| m.get(r, c) == 1;
        let (Some(gm), Some(tm)) = (g.masked_channel_mean(sel), t.masked_channel_mean(sel)) else {
            return Err(validation(format!("sample {i}: mask selects no pixels")));
        };
        total += gm.iter().zip(&tm).map(|(a, b)| (a - b).abs() / 2.0).sum::<f64>() / gm.len() as f64;
    }
    Ok(total / generated.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_generated: usize,
    pub n_reference: usize,
    pub frechet_pixel: f64,
    pub frechet_projection: f64,
    pub inception_score: Option<f64>,
    pub mean_of_score: Option<f64>,
    pub region_color_agreement: Option<f64>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                s.push_str(&format!("{k},{v}\n"));
            }
        };
        row("n_generated", Some(self.n_generated as f64));
        row("n_reference", Some(self.n_reference as f64));
        row("frechet_pixel", Some(self.frechet_pixel));
        row("frechet_projection", Some(self.frechet_projection));
        row("inception_score", self.inception_score);
        row("mean_of_score", self.mean_of_score);
        row("region_color_agreement", self.region_color_agreement);
        s
    }
}

/// Sorted files in `dir` with the given extension.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_images(dir: &Path) -> Result<Vec<ImageTensor<f64>>> {
    list_files(dir, "ppm")?.iter().map(|p| Ok(ImageTensor::from_pnm(&PnmImage::read(p)?))).collect()
}

pub fn read_masks(dir: &Path) -> Result<Vec<BinaryMask>> {
    list_files(dir, "pgm")?.iter().map(|p| BinaryMask::from_pnm(&PnmImage::read(p)?)).collect()
}

/// Whitespace or comma separated scores.
pub fn parse_scores(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| validation(format!("bad score {t:?}: {e}"))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalInputs<'a> {
    pub generated: &'a Path,
    pub reference: &'a Path,
    pub masks: Option<&'a Path>,
    pub probs: Option<&'a Path>,
    pub scores: Option<&'a Path>,
}

pub fn evaluate(inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let generated = read_images(inputs.generated)?;
    let reference = read_images(inputs.reference)?;
    if generated.is_empty() || reference.is_empty() {
        return Err(validation("generated and reference directories must contain PPM images"));
    }
    let region_color_agreement = match inputs.masks {
        Some(dir) => Some(region_color_agreement(&generated, &reference, &read_masks(dir)?)?),
        None => None,
    };
    let inception_score = match inputs.probs {
        Some(p) => Some(inception_score(&ProbMatrix::from_csv(&fs::read_to_string(p)?)?)),
        None => None,
    };
    let mean_of_score = match inputs.scores {
        Some(p) => Some(mean_of_score(&parse_scores(&fs::read_to_string(p)?)?)?),
        None => None,
    };
    Ok(EvalReport {
        n_generated: generated.len(),
        n_reference: reference.len(),
        frechet_pixel: frechet_between(&generated, &reference, pixel_features)?,
        frechet_projection: frechet_between(&generated, &reference, projection_features)?,
        inception_score,
        mean_of_score,
        region_color_agreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(v: [f64; 3], seed: u64) -> ImageTensor<f64> {
        ImageTensor::from_fn(8, 8, 3, |r, c, k| (v[k] + 0.01 * ((r * 8 + c + seed as usize) % 5) as f64).min(1.0))
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a: Vec<_> = (0..6).map(|i| solid([0.1 * i as f64, -0.2, 0.3], i)).collect();
        assert!(frechet_between(&a, &a, pixel_features).unwrap().abs() < 1e-6);
        assert!(frechet_between(&a, &a, projection_features).unwrap().abs() < 1e-6);
    }

    #[test]
    fn disjoint_color_sets_are_far_apart() {
        let a: Vec<_> = (0..6).map(|i| solid([-0.8, -0.8, 0.1 * i as f64], i)).collect();
        let b: Vec<_> = (0..6).map(|i| solid([0.8, 0.8, 0.1 * i as f64], i)).collect();
        assert!(frechet_between(&a, &b, pixel_features).unwrap() > 1.0);
        assert!(frechet_between(&a, &b, projection_features).unwrap() > 0.1);
    }

    #[test]
    fn region_score_matches_color_statistics() {
        let mask = BinaryMask::from_fn(8, 8, |_, c| c < 4);
        let gen = ImageTensor::from_fn(8, 8, 3, |_, c, _| if c < 4 { 0.5 } else { -1.0 });
        let target = ImageTensor::from_fn(8, 8, 3, |_, c, k| if c < 4 { [0.5, 0.1, -0.3][k] } else { 1.0 });
        // |0|, |0.4|, |0.8| in signed units, halved to [0, 1] units, then averaged
        let expected = (0.0 + 0.2 + 0.4) / 3.0;
        let got = region_color_agreement(&[gen], &[target], &[mask]).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn scores_parse_mixed_separators() {
        assert_eq!(parse_scores("1, 2\n3.5 4").unwrap(), vec![1.0, 2.0, 3.5, 4.0]);
        assert!(parse_scores("x").is_err());
    }
}
