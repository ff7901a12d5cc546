//! Train an iterative VAE on whitened natural-image patches, then evaluate
//! it with long inference runs and draw its dictionary.
//!
//! cargo run --release --example train_patches -- --kind ipvae --epochs 100

use std::path::PathBuf;

use clap::Parser;
use fond::cli::commands::{write_eval_outputs, CHECKPOINT_FILE};
use fond::cli::{evaluate, load_data, train_experiment, EvalOptions, ExperimentConfig};
use fond::dynamics::ModelKind;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "ipvae")]
    kind: ModelKind,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    latent_dim: usize,
    #[arg(long, default_value_t = 16)]
    t_train: usize,
    /// β as a multiple of T_train.
    #[arg(long, default_value_t = 1.5)]
    beta_factor: f64,
    #[arg(long, default_value_t = 20_000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 1000)]
    t_test: usize,
    #[arg(long, default_value = "data/natural")]
    images: PathBuf,
    #[arg(long, default_value = "runs/patches")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> fond::Result<()> {
    let a = Args::parse();
    let text = format!(
        r#"
[model]
kind = "{kind}"
latent_dim = {k}

[inference]
t_test = {t_test}

[train]
epochs = {epochs}
t_train = {t}
beta = {beta}

[data]
source = "patches"
dir = "{dir}"
patch = 16
n_train = {n_train}
n_test = {n_test}

[run]
seed = {seed}
out_dir = "{out}"
"#,
        kind = a.kind,
        k = a.latent_dim,
        t_test = a.t_test,
        epochs = a.epochs,
        t = a.t_train,
        beta = a.beta_factor * a.t_train as f64,
        dir = a.images.display(),
        n_train = a.n_train,
        n_test = a.n_test,
        seed = a.seed,
        out = a.out.display(),
    );
    let cfg = ExperimentConfig::parse(&text)?;
    let (train, test) = load_data(&cfg)?;
    println!("{} training patches, {} test patches", train.len(), test.len());
    let run = train_experiment(&cfg, &train, &mut |row, _| {
        println!(
            "epoch {:>3}  loss {:>10.3}  recon {:>9.3}  kl {:>8.3}  {:>6.0}s",
            row.epoch, row.loss, row.recon, row.kl, row.wallclock_s
        );
        Ok(())
    })?;
    if let Some(e) = &run.diverged {
        println!("stopped early: {e}");
    }
    run.checkpoint.save(a.out.join(CHECKPOINT_FILE))?;
    let report = evaluate(&run.checkpoint, &test.samples, &EvalOptions::from_config(&cfg))?;
    write_eval_outputs(&a.out, &run.checkpoint, &report)?;
    for m in &report.metrics {
        println!(
            "{:<8} R² {:.3}  zeros {:.3}  |u̇| {:.3}  converged at t = {}",
            m.decode, m.r2, m.sparsity, m.grad_norm, m.converge_t
        );
    }
    Ok(())
}
