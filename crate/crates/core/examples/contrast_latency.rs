//! Drifting gratings at several contrasts: find the best-tuned units of a
//! trained iP-VAE, then compare when their spike PSTHs peak.
//!
//! cargo run --release --example contrast_latency -- runs/patches/checkpoint.fond --trials 100

use std::path::PathBuf;

use clap::Parser;
use fond::cli::{run_contrast, Checkpoint, ContrastOptions};

#[derive(Parser)]
struct Args {
    #[arg(default_value = "runs/patches/checkpoint.fond")]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    units: usize,
}

fn main() -> fond::Result<()> {
    let a = Args::parse();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let opts = ContrastOptions {
        n_trials: a.trials,
        n_units: a.units,
        ..ContrastOptions::default()
    };
    let rep = run_contrast(&ck, &opts)?;
    println!("{:>5} {:>7} {:>7} {:>12}", "unit", "θ (°)", "sf", "selectivity");
    for u in &rep.units {
        println!("{:>5} {:>7.1} {:>7.4} {:>12.4}", u.unit, u.theta.to_degrees(), u.sf, u.selectivity);
    }
    println!();
    for (c, peak) in &rep.mean_peak {
        let onsets: Vec<f64> = rep
            .latency
            .iter()
            .filter(|l| l.contrast == *c && l.onset_cycles >= 0.0)
            .map(|l| l.onset_cycles)
            .collect();
        let onset = onsets.iter().sum::<f64>() / onsets.len().max(1) as f64;
        println!("contrast {:>4.0}%  mean peak {peak:.4} cycles  mean onset {onset:.4} cycles", 100.0 * c);
    }
    Ok(())
}
