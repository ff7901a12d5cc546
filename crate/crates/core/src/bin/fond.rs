use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fond::cli::{self, ContrastOptions, MapDecode};

#[derive(Parser)]
#[command(name = "fond", about = "Train and probe iterative Poisson and Gaussian VAEs")]
struct Args {
    /// Override the seed from the config or checkpoint.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on its test set.
    Eval {
        checkpoint: PathBuf,
        #[arg(long = "t-test")]
        t_test: Option<usize>,
        #[arg(long = "map-decode")]
        map_decode: Option<MapDecode>,
    },
    /// Train and evaluate a (T_train, β) grid.
    Sweep {
        config: PathBuf,
        #[arg(long = "t-train", value_delimiter = ',', default_value = "8,16,32")]
        t_train: Vec<usize>,
        #[arg(long = "beta-factors", value_delimiter = ',', default_value = "0.5,0.75,1,1.25,1.5,2,3,4")]
        beta_factors: Vec<f64>,
    },
    /// Contrast-dependent response latency with drifting gratings.
    Contrast {
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.15,0.25,0.5,1")]
        contrasts: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        units: usize,
    },
}

fn run(args: Args) -> fond::Result<()> {
    cli::configure_threads()?;
    match args.command {
        Command::Train { config } => {
            let rep = cli::cmd_train(&config, args.seed, &mut |row| {
                eprintln!(
                    "epoch {:>4}  loss {:.4}  recon {:.4}  kl {:.4}  lr {:.2e}  {:.0}s",
                    row.epoch, row.loss, row.recon, row.kl, row.lr, row.wallclock_s
                )
            })?;
            println!("checkpoint: {}", rep.checkpoint_path.display());
            println!("log: {}", rep.log_path.display());
            if let Some(e) = rep.run.diverged {
                return Err(e);
            }
        }
        Command::Eval {
            checkpoint,
            t_test,
            map_decode,
        } => {
            let rep = cli::cmd_eval(&checkpoint, t_test, map_decode, args.seed)?;
            for m in &rep.metrics {
                println!(
                    "{:<8} r2 {:.4}  sparsity {:.4}  grad_norm {:.4}  mse {:.3e}  converge_t {}",
                    m.decode, m.r2, m.sparsity, m.grad_norm, m.per_dim_mse, m.converge_t
                );
            }
        }
        Command::Sweep {
            config,
            t_train,
            beta_factors,
        } => {
            let rep = cli::cmd_sweep(&config, &t_train, &beta_factors, args.seed)?;
            for p in &rep.points {
                println!(
                    "T={:<3} beta={:<6} r2 {:.4}  sparsity {:.4}  map_r2 {:.4}",
                    p.t_train, p.beta, p.r2, p.sparsity, p.map_r2
                );
            }
            for f in &rep.failures {
                eprintln!("failed T={} beta={}: {}", f.t_train, f.beta, f.error);
            }
        }
        Command::Contrast {
            checkpoint,
            contrasts,
            trials,
            units,
        } => {
            let opts = ContrastOptions {
                contrasts,
                n_trials: trials,
                n_units: units,
                seed: args.seed.unwrap_or(0),
                ..ContrastOptions::default()
            };
            let rep = cli::cmd_contrast(&checkpoint, &opts)?;
            for (c, peak) in &rep.mean_peak {
                println!("contrast {c:<5} mean peak {peak:.4} cycles");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
