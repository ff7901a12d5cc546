//! Long inference on held-out data with a trained checkpoint: reconstruction
//! quality, sparsity and update size as the dynamics run well past the
//! training horizon.
//!
//! cargo run --release --example train_patches -- --epochs 20
//! cargo run --release --example inference_trace -- runs/patches/checkpoint.fond

use std::path::PathBuf;

use clap::Parser;
use fond::analysis::convergence_index;
use fond::cli::{evaluate, load_test_data, Checkpoint, EvalOptions, MapDecode};

#[derive(Parser)]
struct Args {
    #[arg(default_value = "runs/patches/checkpoint.fond")]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    t_test: usize,
    /// Evaluate on the first `n` test rows only.
    #[arg(long, default_value_t = 500)]
    n: usize,
}

fn main() -> fond::Result<()> {
    let a = Args::parse();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let test = load_test_data(&ck)?;
    let test = test.slice(0, a.n.min(test.len()));
    println!("{} on {} test rows (trained with T = {})", ck.kind(), test.len(), ck.config.train.t_train);
    let opts = EvalOptions {
        t_test: a.t_test,
        map_decode: MapDecode::Both,
        seed: 0,
    };
    let rep = evaluate(&ck, &test.samples, &opts)?;
    let (rs, rm) = (rep.r2_series("sampled"), rep.r2_series("map"));
    let sp: Vec<f64> = rep.trace.iter().filter(|r| r.decode == "sampled").map(|r| r.sparsity).collect();
    let gn: Vec<f64> = rep.trace.iter().filter(|r| r.decode == "sampled").map(|r| r.grad_norm).collect();
    println!("{:>6} {:>10} {:>10} {:>9} {:>10}", "t", "R² sample", "R² map", "zeros", "|update|");
    for t in [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1000] {
        if t <= rs.len() {
            let i = t - 1;
            println!("{t:>6} {:>10.4} {:>10.4} {:>9.3} {:>10.4}", rs[i], rm[i], sp[i], gn[i]);
        }
    }
    if rs.len() >= 60 {
        println!("R² trace settles at t = {}", convergence_index(&rs)?);
    }
    Ok(())
}
