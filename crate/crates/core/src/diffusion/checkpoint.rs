//! Unified checkpoint file.
//!
//! Layout: 8-byte magic `MFCKPT01`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f32` in manifest
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig};
use super::optim::{AdamW, AdamWConfig};
use super::params::{Parameters, Section};
use super::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"MFCKPT01";
pub const DTYPE: &str = "f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl ScheduleConfig {
    pub fn of(schedule: &NoiseSchedule) -> Self {
        Self { kind: schedule.kind(), steps: schedule.steps() }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub section: Section,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: u64,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: Option<AdamWConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub model: Denoiser<T>,
    pub schedule: NoiseSchedule,
    pub optimizer: Option<AdamW<T>>,
}

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes a model, optionally with its optimizer state.
pub fn encode_checkpoint<T: Real>(
    model: &Denoiser<T>,
    optimizer: Option<&AdamW<T>>,
    schedule: &NoiseSchedule,
    step: u64,
) -> Result<Vec<u8>> {
    let infos = model.param_infos();
    let mut entries: Vec<_> = infos.clone();
    let mut blobs: Vec<&[T]> = model.param_slices();
    if let Some(opt) = optimizer {
        entries.extend(opt.state_infos(&infos));
        blobs.extend(opt.state_slices());
    }
    let manifest = Manifest {
        step,
        model: model.config,
        schedule: ScheduleConfig::of(schedule),
        optimizer: optimizer.map(|o| o.config),
        tensors: entries
            .into_iter()
            .map(|p| TensorEntry { name: p.name, shape: p.shape, dtype: DTYPE.into(), section: p.section, frozen: p.frozen })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let n_values: usize = blobs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blobs {
        for v in b {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads only the manifest.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt("missing MFCKPT01 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len).ok().and_then(|l| l.checked_add(16)).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| ckpt(format!("manifest length {len} exceeds file size {}", bytes.len())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end]).map_err(|e| ckpt(format!("bad manifest: {e}")))?;
    Ok((manifest, end))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (manifest, body_start) = decode_manifest(bytes)?;
    let schedule = manifest.schedule.build().map_err(|e| ckpt(format!("bad schedule: {e}")))?;
    let mut model = Denoiser::<T>::new(manifest.model, 0).map_err(|e| ckpt(format!("bad model config: {e}")))?;
    let infos = model.param_infos();
    let mut expected: Vec<(String, Vec<usize>, Section)> = infos.iter().map(|p| (p.name.clone(), p.shape.clone(), p.section)).collect();
    let optimizer = manifest.optimizer.map(|cfg| AdamW::new(cfg, &model)).transpose()?;
    if let Some(opt) = &optimizer {
        expected.extend(opt.state_infos(&infos).into_iter().map(|p| (p.name, p.shape, p.section)));
    }
    if manifest.tensors.len() != expected.len() {
        return Err(ckpt(format!("manifest lists {} tensors, model expects {}", manifest.tensors.len(), expected.len())));
    }
    for (entry, (name, shape, section)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape || entry.section != *section {
            return Err(ckpt(format!(
                "tensor mismatch: file has {} {:?} ({:?}), model expects {name} {shape:?} ({section:?})",
                entry.name, entry.shape, entry.section
            )));
        }
        if entry.dtype != DTYPE {
            return Err(ckpt(format!("tensor {} has dtype {}, expected {DTYPE}", entry.name, entry.dtype)));
        }
    }
    let n_values: usize = expected.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    let body = &bytes[body_start..];
    if body.len() != 4 * n_values {
        return Err(ckpt(format!("tensor data has {} bytes, expected {}", body.len(), 4 * n_values)));
    }
    let mut values = body.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64));
    for dst in model.param_slices_mut() {
        for (d, v) in dst.iter_mut().zip(values.by_ref()) {
            *d = v;
        }
    }
    let optimizer = match optimizer {
        Some(mut opt) => {
            let state = opt.state_slices().iter().map(|s| values.by_ref().take(s.len()).collect()).collect();
            opt.restore(manifest.step, state)?;
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint { step: manifest.step, model, schedule, optimizer })
}

/// Writes through a temporary file so a crash never leaves a truncated checkpoint.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Denoiser<T>,
    optimizer: Option<&AdamW<T>>,
    schedule: &NoiseSchedule,
    step: u64,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, schedule, step)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::params::Parameters;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            image_channels: 3,
            patch_size: 2,
            n_patches: 4,
            width: 4,
            d_ctx: 6,
            d_k: 4,
            heads: 2,
            blocks: 1,
            lambda: 1.0,
            compressed_tokens: Some(2),
            scale_compression: false,
        }
    }

    #[test]
    fn roundtrip_is_exact_for_f32() {
        let model = Denoiser::<f32>::new(cfg(), 3).unwrap();
        let schedule = build_schedule(50, ScheduleKind::LinearBeta).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &model).unwrap();
        let mut m2 = model.clone();
        let g = model.clone();
        opt.update(&mut m2, &g);
        let bytes = encode_checkpoint(&m2, Some(&opt), &schedule, 7).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.model, m2);
        assert_eq!(back.schedule, schedule);
        let restored = back.optimizer.unwrap();
        assert_eq!(restored.state_slices(), opt.state_slices());
        assert_eq!(restored.steps_taken(), 7);
    }

    #[test]
    fn manifest_records_sections_and_frozen_text_weights() {
        let model = Denoiser::<f32>::new(cfg(), 3).unwrap();
        let schedule = build_schedule(50, ScheduleKind::LinearBeta).unwrap();
        let bytes = encode_checkpoint(&model, None, &schedule, 0).unwrap();
        let (m, _) = decode_manifest(&bytes).unwrap();
        let kt = m.tensors.iter().find(|t| t.name == "blocks.0.adapter.w_kt").unwrap();
        assert!(kt.frozen);
        assert_eq!(kt.section, Section::Adapter);
        assert!(m.tensors.iter().any(|t| t.section == Section::Encoder));
        assert_eq!(m.tensors.len(), model.param_infos().len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = Denoiser::<f32>::new(cfg(), 3).unwrap();
        let schedule = build_schedule(50, ScheduleKind::LinearBeta).unwrap();
        let bytes = encode_checkpoint(&model, None, &schedule, 0).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        let (mut m, end) = decode_manifest(&bytes).unwrap();
        m.tensors[1].shape = vec![1, 1];
        let json = serde_json::to_vec(&m).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[end..]);
        assert!(matches!(decode_checkpoint::<f32>(&forged), Err(Error::Checkpoint(_))));
    }
}
