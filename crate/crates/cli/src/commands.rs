//! Subcommand implementations.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use maskfuse::data_synth::{generate_dataset, load_dataset, read_manifest, reference_patchwork, Rgb};
use maskfuse::diffusion::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use maskfuse::diffusion::sampler::sample_batch;
use maskfuse::diffusion::train::{sample_seed, Trainer, TrainingExample};
use maskfuse::diffusion::{build_schedule, Denoiser, LatentCodec, Parameters, ScheduleKind};
use maskfuse::eval::{evaluate, EvalInputs};
use maskfuse::experiment::{conflicting_probes, half_mask, probe_conditioning, Probe};
use maskfuse::mask_ops::{derive_latent_mask, rebinarize_patches, BinaryMask};
use maskfuse::parallel::try_map_indexed;
use maskfuse::pnm::PnmImage;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{DatasetArgs, EvalArgs, MaskPrepArgs, SampleArgs, TrainArgs};

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub fn dataset(mut cfg: RunConfig, a: DatasetArgs) -> Result<()> {
    if let Some(out) = a.out {
        cfg.paths.dataset = out;
    }
    if let Some(n) = a.n {
        cfg.n_scenes = n;
    }
    cfg.validate()?;
    let m = generate_dataset(&cfg.paths.dataset, cfg.n_scenes, cfg.seed, cfg.image_size, cfg.patch_size, cfg.execution)
        .with_context(|| format!("writing dataset to {}", cfg.paths.dataset.display()))?;
    println!("wrote {} scenes to {}", m.n, cfg.paths.dataset.display());
    Ok(())
}

pub fn mask_prep(mut cfg: RunConfig, a: MaskPrepArgs) -> Result<()> {
    if let Some(p) = a.patch_size {
        cfg.patch_size = p;
        if a.tau.is_none() {
            cfg.zero_threshold = None;
        }
    }
    if let Some(t) = a.tau {
        cfg.zero_threshold = Some(t);
    }
    if let Some(f) = a.factor {
        cfg.latent_factor = f;
    }
    if let Some(v) = a.vote {
        cfg.vote_threshold = v;
    }
    let s = cfg.mask_settings();
    let img = PnmImage::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mask = BinaryMask::from_pnm(&img)?;
    let patch = rebinarize_patches(&mask, s.patch_size, s.zero_threshold)?;
    let latent = derive_latent_mask(&mask, s.latent_factor, s.vote_threshold)?;
    let latent_img = BinaryMask::new(latent.height(), latent.width(), latent.values().to_vec())?.to_pnm();
    ensure_parent(&a.patch_out)?;
    ensure_parent(&a.latent_out)?;
    patch.mask().to_pnm().write(&a.patch_out)?;
    latent_img.write(&a.latent_out)?;
    println!(
        "patch mask {}x{} ({} patches kept), latent mask {}x{}",
        mask.height(),
        mask.width(),
        patch.patch_bits().iter().filter(|&&b| b == 1).count(),
        latent.height(),
        latent.width()
    );
    Ok(())
}

fn load_examples(cfg: &RunConfig) -> Result<Vec<TrainingExample<f32>>> {
    let dir = &cfg.paths.dataset;
    let manifest = read_manifest(dir).with_context(|| format!("reading dataset manifest in {}", dir.display()))?;
    ensure!(
        manifest.size == cfg.image_size && manifest.patch_size == cfg.patch_size,
        "dataset is {}px with P = {}, config expects {}px with P = {}",
        manifest.size,
        manifest.patch_size,
        cfg.image_size,
        cfg.patch_size
    );
    let scenes = load_dataset::<f32>(dir, cfg.proj_size, cfg.execution)?;
    ensure!(!scenes.is_empty(), "dataset in {} is empty", dir.display());
    let codec = LatentCodec::new(cfg.latent_factor)?;
    let settings = cfg.mask_settings();
    Ok(try_map_indexed(cfg.execution, scenes.len(), |i| scenes[i].to_example(&codec, &settings))?)
}

fn frozen_snapshot(model: &Denoiser<f32>) -> Vec<Vec<f32>> {
    model
        .param_infos()
        .iter()
        .zip(model.param_slices())
        .filter(|(i, _)| i.frozen)
        .map(|(_, s)| s.to_vec())
        .collect()
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(p) = a.dataset {
        cfg.paths.dataset = p;
    }
    if let Some(p) = a.checkpoint {
        cfg.paths.checkpoint = p;
    }
    if let Some(p) = a.loss_log {
        cfg.paths.loss_log = p;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.save_every {
        cfg.save_every = v;
    }
    cfg.validate()?;
    let data = load_examples(&cfg)?;
    let mut trainer = if a.resume {
        let ck: Checkpoint<f32> = load_checkpoint(&cfg.paths.checkpoint)
            .with_context(|| format!("loading {}", cfg.paths.checkpoint.display()))?;
        ensure!(ck.model.config == cfg.model(), "checkpoint model shape differs from the configured model");
        let opt = ck.optimizer.context("checkpoint has no optimizer state to resume from")?;
        Trainer::resume(ck.model, opt, ck.schedule, cfg.train(), ck.step as usize)?
    } else {
        let schedule = build_schedule(cfg.diffusion_steps, ScheduleKind::LinearBeta)?;
        Trainer::new(Denoiser::new(cfg.model(), cfg.seed)?, schedule, cfg.train())?
    };
    let remaining = cfg.steps.saturating_sub(trainer.step());
    ensure_parent(&cfg.paths.checkpoint)?;
    ensure_parent(&cfg.paths.loss_log)?;
    let log_file = if a.resume && cfg.paths.loss_log.exists() {
        OpenOptions::new().append(true).open(&cfg.paths.loss_log)?
    } else {
        let mut f = File::create(&cfg.paths.loss_log)?;
        writeln!(f, "step,loss,lr")?;
        f
    };
    let mut log = BufWriter::new(log_file);
    let frozen_before = frozen_snapshot(&trainer.model);
    let (ckpt, every, lr) = (cfg.paths.checkpoint.clone(), cfg.save_every, cfg.lr);
    let losses = trainer.run(&data, remaining, |t, loss| {
        writeln!(log, "{},{loss},{lr}", t.step())?;
        if t.step() % every == 0 {
            log.flush()?;
            save_checkpoint(&ckpt, &t.model, Some(&t.optimizer), &t.schedule, t.step() as u64)?;
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&ckpt, &trainer.model, Some(&trainer.optimizer), &trainer.schedule, trainer.step() as u64)?;
    if frozen_snapshot(&trainer.model) != frozen_before {
        bail!("frozen text projections changed during training");
    }
    match (losses.first(), losses.last()) {
        (Some(f), Some(l)) => println!("trained to step {}: loss {f:.4} -> {l:.4}", trainer.step()),
        _ => println!("checkpoint already at step {}, nothing to do", trainer.step()),
    }
    Ok(())
}

fn parse_color(s: &str) -> Result<Rgb> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("color {s:?} is not r,g,b"))?;
    ensure!(parts.len() == 3, "color {s:?} needs three components");
    ensure!(parts.iter().all(|v| (0.0..=1.0).contains(v)), "color {s:?} has components outside [0, 1]");
    Ok([parts[0], parts[1], parts[2]])
}

#[derive(Serialize)]
struct SampleRecord {
    image: String,
    prompt: String,
    mask: String,
    #[serde(flatten)]
    probe: Probe,
}

pub fn sample(mut cfg: RunConfig, a: SampleArgs) -> Result<()> {
    if let Some(p) = a.checkpoint {
        cfg.paths.checkpoint = p;
    }
    if let Some(p) = a.out {
        cfg.paths.samples = p;
    }
    if let Some(n) = a.n {
        cfg.n_samples = n;
    }
    if let Some(g) = a.guidance_scale {
        cfg.guidance_scale = g;
    }
    if let Some(d) = a.ddim_steps {
        cfg.ddim_steps = d;
    }
    cfg.validate()?;
    let colors = match (&a.text_color, &a.image_color) {
        (Some(t), Some(i)) => Some((parse_color(t)?, parse_color(i)?)),
        _ => None,
    };
    let mask = match &a.mask {
        Some(p) => BinaryMask::from_pnm(&PnmImage::read(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => half_mask(cfg.image_size),
    };
    ensure!(
        (mask.height(), mask.width()) == (cfg.image_size, cfg.image_size),
        "mask is {}x{}, images are {}x{}",
        mask.height(),
        mask.width(),
        cfg.image_size,
        cfg.image_size
    );
    let ck: Checkpoint<f32> =
        load_checkpoint(&cfg.paths.checkpoint).with_context(|| format!("loading {}", cfg.paths.checkpoint.display()))?;
    let model_cfg = ck.model.config;
    ensure!(
        model_cfg.patch_size == cfg.patch_size && model_cfg.n_patches == cfg.model().n_patches,
        "checkpoint was trained for P = {} with {} patches, config gives P = {} with {}",
        model_cfg.patch_size,
        model_cfg.n_patches,
        cfg.patch_size,
        cfg.model().n_patches
    );
    cfg.guidance().validate(ck.schedule.steps())?;
    let probes: Vec<Probe> = match colors {
        Some((text_color, image_color)) => (0..cfg.n_samples)
            .map(|i| Probe { text_color, image_color, seed: sample_seed(cfg.seed, 1, i as u64) })
            .collect(),
        None => conflicting_probes(cfg.n_samples, cfg.seed),
    };
    let settings = cfg.mask_settings();
    let jobs = probes
        .iter()
        .map(|p| Ok((probe_conditioning(p, &mask, &model_cfg, &settings)?, p.seed)))
        .collect::<Result<Vec<_>>>()?;
    let codec = LatentCodec::new(cfg.latent_factor)?;
    let images = sample_batch(&ck.model, &ck.schedule, &codec, &jobs, &cfg.guidance(), cfg.execution)?;

    let out = &cfg.paths.samples;
    let dirs: [PathBuf; 3] = [out.join("images"), out.join("prompts"), out.join("masks")];
    for d in &dirs {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut records = Vec::with_capacity(probes.len());
    for (i, (p, img)) in probes.iter().zip(&images).enumerate() {
        let stem = format!("sample_{i:05}");
        let (image, prompt, mask_file) = (format!("images/{stem}.ppm"), format!("prompts/{stem}.ppm"), format!("masks/{stem}.pgm"));
        img.to_pnm()?.write(out.join(&image))?;
        reference_patchwork::<f64>(p.image_color, &mask, cfg.patch_size, p.seed)?.to_pnm()?.write(out.join(&prompt))?;
        mask.to_pnm().write(out.join(&mask_file))?;
        records.push(SampleRecord { image, prompt, mask: mask_file, probe: p.clone() });
    }
    fs::write(out.join("samples.json"), serde_json::to_string_pretty(&records)?)?;
    println!(
        "wrote {} samples to {} ({} DDIM steps, guidance {})",
        records.len(),
        out.display(),
        cfg.ddim_steps,
        cfg.guidance_scale
    );
    Ok(())
}

pub fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let samples = &cfg.paths.samples;
    let gen = a.gen.unwrap_or_else(|| samples.join("images"));
    let reference = a.reference.unwrap_or_else(|| samples.join("prompts"));
    let masks = a.masks.or_else(|| Some(samples.join("masks")).filter(|p| p.is_dir()));
    let out = a.out.unwrap_or_else(|| cfg.paths.report.clone());
    let report = evaluate(&EvalInputs {
        generated: &gen,
        reference: &reference,
        masks: masks.as_deref(),
        probs: a.probs.as_deref(),
        scores: a.scores.as_deref(),
    })?;
    ensure_parent(&out)?;
    fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    fs::write(out.with_extension("csv"), report.to_csv())?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
