//! The model family side by side on the same whitened patches: spiking
//! Poisson, Gaussian, rectified Gaussian, predictive coding and LCA.
//!
//! cargo run --release --example compare_models -- --epochs 10

use std::path::PathBuf;

use clap::Parser;
use fond::cli::{evaluate, load_data, train_experiment, EvalOptions, ExperimentConfig};
use fond::dynamics::ModelKind;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    latent_dim: usize,
    #[arg(long, default_value_t = 4000)]
    n_train: usize,
    #[arg(long, default_value_t = 300)]
    t_test: usize,
    #[arg(long, default_value = "data/natural")]
    images: PathBuf,
}

fn main() -> fond::Result<()> {
    let a = Args::parse();
    let t = 16.0;
    let models = [
        (ModelKind::Ipvae, 1.5 * t),
        (ModelKind::Igvae, 0.5 * t),
        (ModelKind::Igrelu, 0.5 * t),
        (ModelKind::Pc, 0.0),
        (ModelKind::Lca, 0.0),
    ];
    println!("{:<8} {:>8} {:>8} {:>8} {:>12}", "model", "R²", "R² map", "zeros", "settles at");
    for (kind, beta) in models {
        let text = format!(
            "[model]\nkind = \"{kind}\"\nlatent_dim = {}\n[inference]\nt_test = {}\n\
             [train]\nepochs = {}\nt_train = 16\nbeta = {beta}\n\
             [data]\nsource = \"patches\"\ndir = \"{}\"\nn_train = {}\nn_test = 500\n",
            a.latent_dim,
            a.t_test,
            a.epochs,
            a.images.display(),
            a.n_train
        );
        let cfg = ExperimentConfig::parse(&text)?;
        let name = kind.to_string();
        let (train, test) = load_data(&cfg)?;
        let run = train_experiment(&cfg, &train, &mut |_, _| Ok(()))?;
        if let Some(e) = run.diverged {
            println!("{name:<8} stopped: {e}");
            continue;
        }
        let rep = evaluate(&run.checkpoint, &test.samples, &EvalOptions::from_config(&cfg))?;
        let s = rep.metric("sampled").expect("sampled decode");
        let m = rep.metric("map").expect("map decode");
        println!("{name:<8} {:>8.3} {:>8.3} {:>8.3} {:>12}", s.r2, m.r2, s.sparsity, s.converge_t);
    }
    Ok(())
}
