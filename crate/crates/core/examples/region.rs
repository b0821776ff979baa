//! Trains the desk-scale region experiment and prints the probe summary.
//!
//! Usage: `cargo run --release --example region -- [seed] [steps] [--sequential]`

use maskfuse::experiment::{run_region_experiment, RegionExperiment};
use maskfuse::Execution;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let sequential = args.iter().any(|a| a == "--sequential");
    let mut positional = args.iter().filter(|a| !a.starts_with("--"));
    let seed = positional.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let mut exp = RegionExperiment::desk(seed);
    if let Some(steps) = positional.next() {
        exp.train_steps = steps.parse()?;
    }
    let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
    let (_, r) = run_region_experiment(&exp, exec)?;
    println!(
        "seed {seed}: train {:.1}s, loss {:.4} -> {:.4} (ratio {:.3}), image color wins {}/{}",
        r.train_seconds,
        r.initial_loss,
        r.final_loss,
        r.loss_ratio(),
        r.image_wins,
        r.probes.len()
    );
    Ok(())
}
