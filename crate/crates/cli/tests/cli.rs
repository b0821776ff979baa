use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskfuse::diffusion::checkpoint::load_checkpoint;
use maskfuse::mask_ops::BinaryMask;
use maskfuse::pnm::PnmImage;
use tempfile::TempDir;

fn maskfuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskfuse")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = maskfuse(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let out = maskfuse(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, json).unwrap();
    p
}

const SMALL: &str = r#"{"width": 8, "proj_size": 16, "attention_dim": 8, "n_scenes": 12, "batch_size": 2, "save_every": 5}"#;

fn count_ext(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)).count()
}

#[test]
fn dataset_defaults_to_one_hundred_scenes() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--out", "d"]);
    assert_eq!(count_ext(&t.path().join("d"), "ppm"), 100);
    assert_eq!(count_ext(&t.path().join("d"), "pgm"), 100);
}

#[test]
fn dataset_is_reproducible_per_seed() {
    let t = TempDir::new().unwrap();
    for d in ["a", "b", "c"] {
        let seed = if d == "c" { "2" } else { "1" };
        ok(t.path(), &["dataset", "--out", d, "--n", "5", "--seed", seed]);
    }
    let read = |d: &str| fs::read(t.path().join(d).join("manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn invalid_config_writes_nothing() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), r#"{"image_size": 18}"#);
    let msg = err(t.path(), &["--config", cfg.to_str().unwrap(), "dataset", "--out", "d"]);
    assert!(msg.contains("not divisible"), "{msg}");
    assert!(!t.path().join("d").exists());
    let msg = err(t.path(), &["--config", cfg.to_str().unwrap(), "train", "--dataset", "d"]);
    assert!(msg.contains("not divisible"), "{msg}");
    assert!(!t.path().join("run").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), r#"{"stepz": 3}"#);
    assert!(err(t.path(), &["--config", cfg.to_str().unwrap(), "dataset"]).contains("stepz"));
}

fn write_mask(path: &Path, mask: &BinaryMask) {
    mask.to_pnm().write(path).unwrap();
}

fn read_mask(path: &Path) -> BinaryMask {
    BinaryMask::from_pnm(&PnmImage::read(path).unwrap()).unwrap()
}

#[test]
fn mask_prep_examples() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    write_mask(&d.join("ones.pgm"), &BinaryMask::filled(16, 16, true));
    ok(d, &["mask-prep", "--input", "ones.pgm", "--patch-out", "p.pgm", "--latent-out", "l.pgm"]);
    assert_eq!(read_mask(&d.join("p.pgm")).count_zeros(), 0);
    let latent = read_mask(&d.join("l.pgm"));
    assert_eq!((latent.height(), latent.width(), latent.count_zeros()), (8, 8, 0));

    // 1px checkerboard: every 4x4 patch has exactly 8 zeros.
    write_mask(&d.join("checker.pgm"), &BinaryMask::from_fn(16, 16, |r, c| (r + c) % 2 == 0));
    for (tau, zeros) in [("8", 0), ("7", 256)] {
        ok(d, &["mask-prep", "--input", "checker.pgm", "--tau", tau, "--patch-out", "p.pgm", "--latent-out", "l.pgm"]);
        assert_eq!(read_mask(&d.join("p.pgm")).count_zeros(), zeros, "tau {tau}");
    }

    let uniform = BinaryMask::from_fn(16, 16, |r, c| (r / 4 + c / 4) % 3 == 0);
    write_mask(&d.join("uniform.pgm"), &uniform);
    ok(d, &["mask-prep", "--input", "uniform.pgm", "--tau", "0", "--patch-out", "p.pgm", "--latent-out", "l.pgm"]);
    assert_eq!(read_mask(&d.join("p.pgm")), uniform);
}

#[test]
fn malformed_pgm_reports_byte_offset_and_writes_nothing() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("bad.pgm"), b"P5\n4 4\n255\nabc").unwrap();
    let msg = err(t.path(), &["mask-prep", "--input", "bad.pgm", "--patch-out", "p.pgm", "--latent-out", "l.pgm"]);
    assert!(msg.contains("parse error at byte"), "{msg}");
    assert!(!t.path().join("p.pgm").exists() && !t.path().join("l.pgm").exists());
}

#[test]
fn train_resume_and_sample() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let cfg = write_config(d, SMALL);
    let c = cfg.to_str().unwrap();
    ok(d, &["--config", c, "dataset"]);
    ok(d, &["--config", c, "train", "--steps", "10"]);
    let log = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr\n"));
    assert_eq!(log.lines().count(), 11);
    let first = load_checkpoint::<f32>(&d.join("run/model.ckpt")).unwrap();
    assert_eq!(first.step, 10);

    ok(d, &["--config", c, "train", "--steps", "15", "--resume"]);
    let log = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 16);
    assert!(log.lines().last().unwrap().starts_with("15,"));
    let resumed = load_checkpoint::<f32>(&d.join("run/model.ckpt")).unwrap();
    assert_eq!(resumed.step, 15);
    for (a, b) in first.model.blocks.iter().zip(&resumed.model.blocks) {
        assert_eq!(a.adapter.w_kt, b.adapter.w_kt);
        assert_eq!(a.adapter.w_vt, b.adapter.w_vt);
    }

    let stdout = ok(d, &["--config", c, "sample", "--out", "s1", "--n", "3", "--seed", "4"]);
    assert!(stdout.contains("30 DDIM steps"), "{stdout}");
    ok(d, &["--config", c, "sample", "--out", "s2", "--n", "3", "--seed", "4"]);
    ok(d, &["--config", c, "sample", "--out", "s3", "--n", "3", "--seed", "4", "--guidance-scale", "0"]);
    let img = |s: &str| fs::read(d.join(s).join("images/sample_00001.ppm")).unwrap();
    assert_eq!(img("s1"), img("s2"));
    assert_ne!(img("s1"), img("s3"));
    let records: serde_json::Value = serde_json::from_slice(&fs::read(d.join("s1/samples.json")).unwrap()).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 3);

    ok(d, &["--config", c, "sample", "--out", "s4", "--n", "2", "--text-color", "0.1,0.2,0.9", "--image-color", "1,0.5,0"]);
    assert_eq!(count_ext(&d.join("s4/images"), "ppm"), 2);

    let report = ok(d, &["eval", "--gen", "s1/images", "--ref", "s2/images", "--out", "r.json"]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["frechet_pixel"].as_f64().unwrap().abs() < 1e-6);
    assert!(v["frechet_projection"].as_f64().unwrap().abs() < 1e-6);
    assert!(d.join("r.csv").is_file());
}

#[test]
fn sample_rejects_corrupt_checkpoint() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("bad.ckpt"), b"MFCKPT01garbage").unwrap();
    let msg = err(t.path(), &["sample", "--checkpoint", "bad.ckpt", "--out", "s"]);
    assert!(msg.contains("checkpoint"), "{msg}");
    assert!(!t.path().join("s").exists());
}

fn solid_set(dir: &Path, rgb: [u8; 3], n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let data: Vec<u8> = (0..64).flat_map(|p| rgb.map(|v| v.saturating_add(((p + i) % 7) as u8))).collect();
        PnmImage::new(8, 8, 3, data).unwrap().write(dir.join(format!("{i}.ppm"))).unwrap();
    }
}

#[test]
fn eval_scores_color_sets() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    solid_set(&d.join("red"), [200, 10, 10], 4);
    solid_set(&d.join("blue"), [10, 10, 200], 4);
    fs::create_dir_all(d.join("m")).unwrap();
    for i in 0..4 {
        write_mask(&d.join("m").join(format!("{i}.pgm")), &BinaryMask::from_fn(8, 8, |_, c| c < 4));
    }
    fs::write(d.join("probs.csv"), "1,0\n0,1\n").unwrap();
    fs::write(d.join("scores.txt"), "3\n4\n5\n").unwrap();
    let out = ok(d, &["eval", "--gen", "red", "--ref", "blue", "--masks", "m", "--probs", "probs.csv", "--scores", "scores.txt", "--out", "rep.json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["frechet_pixel"].as_f64().unwrap() > 1.0);
    assert!((v["inception_score"].as_f64().unwrap() - 2.0).abs() < 1e-9);
    assert!((v["mean_of_score"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    let region = v["region_color_agreement"].as_f64().unwrap();
    assert!((region - 2.0 * 190.0 / 255.0 / 3.0).abs() < 1e-9, "{region}");
    fs::create_dir_all(d.join("empty")).unwrap();
    assert!(err(d, &["eval", "--gen", "empty", "--ref", "blue"]).contains("PPM"));
}

#[test]
fn thread_cap_is_validated() {
    let t = TempDir::new().unwrap();
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_maskfuse"))
            .current_dir(t.path())
            .env("MASKFUSE_THREADS", v)
            .args(["dataset", "--out", "d", "--n", "2"])
            .output()
            .unwrap()
    };
    assert!(!run("0").status.success());
    assert!(!run("many").status.success());
    assert!(run("1").status.success());
}

#[test]
fn default_training_run_halves_the_loss() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["dataset", "--n", "100", "--seed", "5"]);
    ok(d, &["train", "--seed", "5", "--save-every", "1000"]);
    let log = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 2000);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&losses[..100]), mean(&losses[1900..]));
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}
