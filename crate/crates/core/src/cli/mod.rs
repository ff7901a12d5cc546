//! Experiment harness behind the `fond` binary: config files, checkpoints,
//! the four commands and their CSV/SVG outputs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod svg;

pub use checkpoint::{write_atomic, Checkpoint};
pub use commands::{
    cmd_contrast, cmd_eval, cmd_sweep, cmd_train, evaluate, load_data, load_test_data, run_contrast, run_sweep,
    train_experiment, write_eval_outputs, ContrastOptions, ContrastReport, EvalOptions, EvalReport, LatencyRow,
    MetricsRow, PsthRow, SweepFailure, SweepReport, TraceRow, TrainReport, TrainRun,
};
pub use config::{DataSpec, ExperimentConfig, MapDecode};

/// Caps the global rayon pool at `FOND_THREADS` threads when that variable
/// is set. Returns the cap applied, if any.
pub fn configure_threads() -> crate::Result<Option<usize>> {
    let Ok(v) = std::env::var("FOND_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| crate::FondError::Config(format!("FOND_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::FondError::Config(e.to_string()))?;
    Ok(Some(n))
}
