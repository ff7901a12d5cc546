//! A small rate–distortion sweep: train iP-VAEs over a grid of training
//! horizons and KL weights and report reconstruction against sparsity.
//!
//! cargo run --release --example sweep -- --epochs 5

use std::path::PathBuf;

use clap::Parser;
use fond::cli::{run_sweep, ExperimentConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,16")]
    t_train: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
    beta_factors: Vec<f64>,
    #[arg(long, default_value = "data/natural")]
    images: PathBuf,
}

fn main() -> fond::Result<()> {
    let a = Args::parse();
    let text = format!(
        "[model]\nkind = \"ipvae\"\nlatent_dim = 64\n[inference]\nt_test = 200\n\
         [train]\nepochs = {}\n[data]\nsource = \"patches\"\ndir = \"{}\"\nn_train = 3000\nn_test = 300\n\
         [run]\nout_dir = \"runs/sweep_example\"\n",
        a.epochs,
        a.images.display()
    );
    let cfg = ExperimentConfig::parse(&text)?;
    let mut rep = run_sweep(&cfg, &a.t_train, &a.beta_factors, false)?;
    rep.points.sort_by(|p, q| (p.t_train, p.beta).partial_cmp(&(q.t_train, q.beta)).unwrap());
    println!("{:>4} {:>7} {:>8} {:>8} {:>9}", "T", "β", "R²", "zeros", "distance");
    for p in &rep.points {
        println!("{:>4} {:>7.1} {:>8.3} {:>8.3} {:>9.3}", p.t_train, p.beta, p.r2, p.sparsity, p.distance);
    }
    for f in &rep.failures {
        println!("T = {} β = {}: {}", f.t_train, f.beta, f.error);
    }
    Ok(())
}
