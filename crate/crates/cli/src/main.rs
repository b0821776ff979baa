//! `maskfuse` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "maskfuse", version, about = "Mask-routed text/image prompt diffusion at desk scale")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scene dataset.
    Dataset(DatasetArgs),
    /// Derive patch-level and latent-level masks from a PGM mask.
    MaskPrep(MaskPrepArgs),
    /// Train the denoiser and adapters.
    Train(TrainArgs),
    /// Sample images from a checkpoint.
    Sample(SampleArgs),
    /// Score generated images against references.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MaskPrepArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Zero-count threshold tau.
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub vote: Option<f64>,
    #[arg(long)]
    pub patch_out: PathBuf,
    #[arg(long)]
    pub latent_out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Total step count, including steps already in a resumed checkpoint.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Continue from the checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Background color `r,g,b` in [0, 1] for the text prompt.
    #[arg(long, requires = "image_color")]
    pub text_color: Option<String>,
    /// Foreground color `r,g,b` in [0, 1] for the image prompt.
    #[arg(long, requires = "text_color")]
    pub image_color: Option<String>,
    /// PGM mask selecting the image-prompt region; default is the left half.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Generated PPM directory.
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Reference PPM directory, paired with `--gen` by sorted file name.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// PGM masks for the region color-agreement score.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// CSV class-probability matrix for the Inception Score.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Rating scores for the mean-of-score.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// JSON report path; a CSV copy is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MASKFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("MASKFUSE_THREADS={v:?} is not a count"))?;
    if n == 0 {
        bail!("MASKFUSE_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.sequential {
        cfg.execution = maskfuse::Execution::Sequential;
    }
    match cli.command {
        Command::Dataset(a) => commands::dataset(cfg, a),
        Command::MaskPrep(a) => commands::mask_prep(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Sample(a) => commands::sample(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
