//! Unsupervised iP-VAE codes for handwritten digits, scored by a linear
//! probe trained on the inferred firing rates.
//!
//! cargo run --release --example mnist_probe -- --epochs 5 --limit 1000

use std::path::PathBuf;

use clap::Parser;
use fond::analysis::probe_classifier;
use fond::cli::{evaluate, load_data, train_experiment, EvalOptions, ExperimentConfig, MapDecode};
use fond::numerics::Tensor;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    latent_dim: usize,
    #[arg(long, default_value_t = 16)]
    t_train: usize,
    #[arg(long, default_value_t = 100)]
    t_test: usize,
    /// Training images to use.
    #[arg(long, default_value_t = 1000)]
    limit: usize,
    #[arg(long, default_value = "data/mnist")]
    dir: PathBuf,
}

fn main() -> fond::Result<()> {
    let a = Args::parse();
    let d = a.dir.display();
    let text = format!(
        "[model]\nkind = \"ipvae\"\nlatent_dim = {}\n[inference]\nt_test = {}\nmap_decode = \"both\"\n\
         [train]\nepochs = {}\nt_train = {}\nbeta = {}\n\
         [data]\nsource = \"idx\"\ntrain_images = \"{d}/train-images-idx3-ubyte\"\n\
         train_labels = \"{d}/train-labels-idx1-ubyte\"\ntest_images = \"{d}/t10k-images-idx3-ubyte\"\n\
         test_labels = \"{d}/t10k-labels-idx1-ubyte\"\nlimit_train = {}\n",
        a.latent_dim, a.t_test, a.epochs, a.t_train, a.t_train, a.limit
    );
    let cfg = ExperimentConfig::parse(&text)?;
    let (train, test) = load_data(&cfg)?;
    let run = train_experiment(&cfg, &train, &mut |row, _| {
        println!("epoch {:>3}  loss {:>9.3}", row.epoch, row.loss);
        Ok(())
    })?;
    let opts = EvalOptions::from_config(&cfg);
    let on_test = evaluate(&run.checkpoint, &test.samples, &opts)?;
    for m in &on_test.metrics {
        println!("{:<8} R² {:.3}  per-pixel MSE {:.2e}  zeros {:.3}", m.decode, m.r2, m.per_dim_mse, m.sparsity);
    }
    let on_train = evaluate(
        &run.checkpoint,
        &train.samples,
        &EvalOptions {
            map_decode: MapDecode::On,
            ..opts
        },
    )?;
    let k = on_train.final_map.cols();
    let mut rows = on_train.final_map.into_data();
    rows.extend_from_slice(on_test.final_map.data());
    let codes = Tensor::new(vec![rows.len() / k, k], rows)?;
    let mut labels = train.labels.clone().expect("labelled digits");
    labels.extend(test.labels.clone().expect("labelled digits"));
    let acc = probe_classifier(&codes, &labels, train.len() as f64 / labels.len() as f64)?;
    println!("linear probe accuracy on rates: {:.2}%", 100.0 * acc);
    Ok(())
}
