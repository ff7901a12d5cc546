//! The `train`, `eval`, `sweep` and `contrast` commands, usable as library
//! calls. Each `cmd_*` function reads its inputs from disk and writes its
//! outputs next to them; the underlying `*_experiment` / `evaluate` /
//! `run_*` functions work on in-memory values.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{convergence_index, distance_to_optimum, psth, SweepPoint, CONVERGENCE_WINDOW};
use crate::cli::checkpoint::{write_atomic, Checkpoint};
use crate::cli::config::{DataSpec, ExperimentConfig, MapDecode};
use crate::cli::svg;
use crate::data::{
    grating, load_idx_dataset, natural_patches, natural_test_patches, tuning_probe, Dataset,
    GratingSpec, ProbeOptions, UnitTuning,
};
use crate::dynamics::{
    r2_sums, run_inference_with, run_stimulus, InferenceState, Latent, ModelKind, RunOptions, Sampler, StepRecord,
};
use crate::error::{FondError, Result};
use crate::learning::{train, EpochLog};
use crate::model::{default_hidden, init_params_with_hidden, GenerativeParams};
use crate::numerics::rng::child_seed;
use crate::numerics::{Purpose, RngStream, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.fond";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Rows per parallel evaluation chunk.
const EVAL_CHUNK: usize = 100;
/// Stream tag separating evaluation noise from training noise.
const EVAL_TAG: u64 = 0xE7A1;
const CONTRAST_TAG: u64 = 0xC0_7A57;

/// Loads the training and test sets named by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSpec::Patches {
            dir,
            patch,
            n_train,
            n_test,
        } => natural_patches(dir, *patch, *n_train, *n_test, cfg.run.seed),
        DataSpec::Idx { .. } => Ok((load_idx_split(&cfg.data, true)?, load_idx_split(&cfg.data, false)?)),
    }
}

/// The test set for a trained checkpoint; patches are whitened with the
/// stored descriptor rather than a fresh fit.
pub fn load_test_data(ck: &Checkpoint) -> Result<Dataset> {
    let cfg = &ck.config;
    let ds = match &cfg.data {
        DataSpec::Patches { dir, patch, n_test, .. } => {
            let w = ck
                .whitening
                .as_ref()
                .ok_or_else(|| FondError::InvalidArgument("patch checkpoint without whitening".into()))?;
            natural_test_patches(dir, *patch, *n_test, cfg.run.seed, w)?
        }
        DataSpec::Idx { .. } => load_idx_split(&cfg.data, false)?,
    };
    if ds.dim() != ck.params.input_dim() {
        return Err(FondError::Shape(format!(
            "test data has M = {} but the checkpoint expects M = {}",
            ds.dim(),
            ck.params.input_dim()
        )));
    }
    Ok(ds)
}

fn load_idx_split(spec: &DataSpec, train_split: bool) -> Result<Dataset> {
    let DataSpec::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
        limit_train,
        limit_test,
    } = spec
    else {
        unreachable!("caller checked the source")
    };
    let (img, lab, limit) = if train_split {
        (train_images, train_labels, limit_train)
    } else {
        (test_images, test_labels, limit_test)
    };
    let ds = load_idx_dataset(img, lab.as_deref())?;
    Ok(match limit {
        Some(n) => ds.slice(0, *n),
        None => ds,
    })
}

/// Fresh parameters for the config, seeded from `run.seed`.
pub fn init_model(cfg: &ExperimentConfig, m: usize) -> Result<GenerativeParams> {
    let k = cfg.model.latent_dim;
    let mut rng = RngStream::for_step(cfg.run.seed, 0, 0, Purpose::Init);
    init_params_with_hidden(
        m,
        k,
        cfg.model.decoder_kind(),
        cfg.model.kind.family(),
        cfg.model.hidden.unwrap_or_else(|| default_hidden(k)),
        &mut rng,
    )
}

#[derive(Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub diverged: Option<FondError>,
}

/// Trains on already loaded data. `on_epoch` sees every epoch's log row and
/// the current checkpoint.
pub fn train_experiment(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog, &Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let init = init_model(cfg, train_set.dim())?;
    let whitening = train_set.meta.whitening.clone();
    let mut hook = |row: &EpochLog, params: &GenerativeParams| {
        let ck = Checkpoint {
            config: cfg.clone(),
            params: params.clone(),
            whitening: whitening.clone(),
        };
        on_epoch(row, &ck)
    };
    let outcome = train(cfg.model.kind, &cfg.train, &train_set.samples, init, cfg.run.seed, &mut hook)?;
    Ok(TrainRun {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            params: outcome.params,
            whitening,
        },
        log: outcome.log,
        diverged: outcome.diverged,
    })
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub run: TrainRun,
}

/// `fond train <cfg>`: writes `checkpoint.fond` and `train_log.csv` into
/// `run.out_dir`, refreshing both after every epoch.
pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    let (train_set, _) = load_data(&cfg)?;
    let out = cfg.run.out_dir.clone();
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut rows: Vec<EpochLog> = Vec::new();
    let run = train_experiment(&cfg, &train_set, &mut |row, ck| {
        rows.push(row.clone());
        progress(row);
        ck.save(&ck_path)?;
        write_csv(&log_path, &EPOCH_LOG_HEADER, &rows)
    })?;
    run.checkpoint.save(&ck_path)?;
    write_csv(&log_path, &EPOCH_LOG_HEADER, &run.log)?;
    Ok(TrainReport {
        checkpoint_path: ck_path,
        log_path,
        run,
    })
}

const EPOCH_LOG_HEADER: [&str; 8] = ["epoch", "step", "loss", "recon", "kl", "lr", "beta_eff", "wallclock_s"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub decode: String,
    pub r2: f64,
    pub sparsity: f64,
    pub grad_norm: f64,
    pub per_dim_mse: f64,
    pub converge_t: usize,
    pub free_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub decode: String,
    pub t: usize,
    pub r2: f64,
    pub sparsity: f64,
    pub grad_norm: f64,
    pub free_energy: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub t_test: usize,
    pub map_decode: MapDecode,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        EvalOptions {
            t_test: cfg.inference.t_test,
            map_decode: cfg.inference.map_decode,
            seed: cfg.run.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// One row per reported decode (`sampled`, `map`).
    pub metrics: Vec<MetricsRow>,
    pub trace: Vec<TraceRow>,
    /// Final mean code (rates or means), `[N × K]`.
    pub final_map: Tensor,
    /// Final sampled code, `[N × K]`.
    pub final_z: Tensor,
    /// Test-set mean of each unit's final potential (`u` or `µ`).
    pub unit_potential: Vec<f64>,
    /// Test-set mean of each unit's final mean code.
    pub unit_activity: Vec<f64>,
}

impl EvalReport {
    pub fn metric(&self, decode: &str) -> Option<&MetricsRow> {
        self.metrics.iter().find(|m| m.decode == decode)
    }

    /// R² trace for one decode, indexed by step.
    pub fn r2_series(&self, decode: &str) -> Vec<f64> {
        self.trace.iter().filter(|r| r.decode == decode).map(|r| r.r2).collect()
    }
}

struct ChunkEval {
    rows: usize,
    /// Total input variance of the chunk, the weight of its R².
    ss_tot: f64,
    records: Vec<StepRecord>,
    state: InferenceState,
    sse_sampled: f64,
    sse_map: f64,
}

/// Runs `t_test` inference steps on every test row (in parallel chunks with
/// per-row noise keys) and aggregates test-set-averaged traces.
pub fn evaluate(ck: &Checkpoint, test: &Tensor, opts: &EvalOptions) -> Result<EvalReport> {
    let params = &ck.params;
    let kind = ck.kind();
    let x = test.as_batch();
    if x.cols() != params.input_dim() {
        return Err(FondError::Shape(format!(
            "test data has M = {} but the checkpoint expects M = {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let n = x.rows();
    if n == 0 || opts.t_test == 0 {
        return Err(FondError::InvalidArgument("evaluation needs rows and T_test ≥ 1".into()));
    }
    let tc = &ck.config.train;
    let run = RunOptions {
        kl_target: tc.kl_target,
        decode: opts.map_decode.decode(),
        lca_lambda: tc.lca_lambda,
        lca_tau: tc.lca_tau,
        ..RunOptions::new(opts.t_test, tc.beta)
    };
    let seed = child_seed(opts.seed, EVAL_TAG);
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let chunks: Vec<Result<ChunkEval>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (s..e).collect();
            let xc = x.select_rows(&idx);
            let sampler = Sampler::keyed_rows(seed, (s as u64..e as u64).collect());
            let (state, trace) = run_inference_with(&xc, params, kind, &run, &sampler, &mut |_, _| Ok(()))?;
            let sse = |code: &Tensor| -> Result<f64> {
                let xhat = params.decode_batch(code)?.xhat;
                Ok(xc.data().iter().zip(xhat.data()).map(|(a, b)| (a - b).powi(2)).sum())
            };
            let sse_sampled = sse(&state.z)?;
            let sse_map = if kind.is_variational() { sse(&state.map)? } else { sse_sampled };
            Ok(ChunkEval {
                rows: e - s,
                ss_tot: r2_sums(&xc, &xc).1,
                records: trace.records,
                state,
                sse_sampled,
                sse_map,
            })
        })
        .collect();
    let chunks = chunks.into_iter().collect::<Result<Vec<_>>>()?;

    let nf = n as f64;
    let avg = |t: usize, f: &dyn Fn(&StepRecord) -> f64| -> f64 {
        chunks.iter().map(|c| f(&c.records[t]) * c.rows as f64).sum::<f64>() / nf
    };
    // pooled R² of the whole set from the chunks' pooled R²
    let ss_tot: f64 = chunks.iter().map(|c| c.ss_tot).sum();
    let avg_r2 = |t: usize, f: &dyn Fn(&StepRecord) -> f64| -> f64 {
        if ss_tot > 0.0 {
            chunks.iter().map(|c| f(&c.records[t]) * c.ss_tot).sum::<f64>() / ss_tot
        } else {
            0.0
        }
    };
    let mut decodes: Vec<&str> = Vec::new();
    if matches!(opts.map_decode, MapDecode::Off | MapDecode::Both) {
        decodes.push("sampled");
    }
    if matches!(opts.map_decode, MapDecode::On | MapDecode::Both) {
        decodes.push("map");
    }
    let mut trace = Vec::new();
    let mut metrics = Vec::new();
    let md = (n * params.input_dim()) as f64;
    for &d in &decodes {
        let r2_of = |r: &StepRecord| {
            if d == "map" {
                r.r2_map.unwrap_or(f64::NAN)
            } else {
                r.r2.unwrap_or(f64::NAN)
            }
        };
        let series: Vec<TraceRow> = (0..opts.t_test)
            .map(|t| TraceRow {
                decode: d.to_string(),
                t,
                r2: avg_r2(t, &r2_of),
                sparsity: avg(t, &|r| r.sparsity),
                grad_norm: avg(t, &|r| r.grad_norm),
                free_energy: avg(t, &|r| r.free_energy),
            })
            .collect();
        let r2s: Vec<f64> = series.iter().map(|r| r.r2).collect();
        let converge_t = if r2s.len() < CONVERGENCE_WINDOW {
            r2s.len()
        } else {
            convergence_index(&r2s)?
        };
        let last = series.last().expect("t_test ≥ 1");
        let sse: f64 = chunks
            .iter()
            .map(|c| if d == "map" { c.sse_map } else { c.sse_sampled })
            .sum();
        metrics.push(MetricsRow {
            decode: d.to_string(),
            r2: last.r2,
            sparsity: last.sparsity,
            grad_norm: last.grad_norm,
            per_dim_mse: sse / md,
            converge_t,
            free_energy: last.free_energy,
        });
        trace.extend(series);
    }

    let k = params.latent_dim();
    let mut final_map = Tensor::zeros(&[n, k]);
    let mut final_z = Tensor::zeros(&[n, k]);
    let mut potential = vec![0.0; k];
    let mut row = 0;
    for c in &chunks {
        let pot = match &c.state.latent {
            Latent::Poisson { u } | Latent::Lca { u } => u,
            Latent::Gaussian { mu, .. } | Latent::Pc { mu } => mu,
        };
        for i in 0..c.rows {
            final_map.row_mut(row).copy_from_slice(c.state.map.row(i));
            final_z.row_mut(row).copy_from_slice(c.state.z.row(i));
            for (p, v) in potential.iter_mut().zip(pot.row(i)) {
                *p += v / nf;
            }
            row += 1;
        }
    }
    let unit_activity = final_map.sum_rows().data().iter().map(|v| v / nf).collect();
    Ok(EvalReport {
        metrics,
        trace,
        final_map,
        final_z,
        unit_potential: potential,
        unit_activity,
    })
}

/// Dictionary columns ordered by ascending aggregate posterior potential.
pub fn feature_order(report: &EvalReport) -> Vec<usize> {
    let mut order: Vec<usize> = (0..report.unit_potential.len()).collect();
    order.sort_by(|&a, &b| report.unit_potential[a].total_cmp(&report.unit_potential[b]));
    order
}

/// `fond eval <ckpt>`: writes `metrics.csv`, `trace.csv` and, for square
/// inputs with a linear dictionary, `dictionary.svg` next to the checkpoint.
pub fn cmd_eval(
    ckpt_path: &Path,
    t_test: Option<usize>,
    map_decode: Option<MapDecode>,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt_path)?;
    let test = load_test_data(&ck)?;
    let mut opts = EvalOptions::from_config(&ck.config);
    if let Some(t) = t_test {
        opts.t_test = t;
    }
    if let Some(d) = map_decode {
        opts.map_decode = d;
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    let report = evaluate(&ck, &test.samples, &opts)?;
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    write_eval_outputs(dir, &ck, &report)?;
    Ok(report)
}

pub fn write_eval_outputs(dir: &Path, ck: &Checkpoint, report: &EvalReport) -> Result<()> {
    write_csv(
        &dir.join("metrics.csv"),
        &["decode", "r2", "sparsity", "grad_norm", "per_dim_mse", "converge_t", "free_energy"],
        &report.metrics,
    )?;
    write_csv(
        &dir.join("trace.csv"),
        &["decode", "t", "r2", "sparsity", "grad_norm", "free_energy"],
        &report.trace,
    )?;
    let m = ck.params.input_dim();
    let side = (m as f64).sqrt().round() as usize;
    if let Some(phi) = ck.params.decoder.dictionary() {
        if side * side == m {
            let svg = svg::dictionary_grid(phi, side, &feature_order(report))?;
            write_atomic(&dir.join("dictionary.svg"), svg.as_bytes())?;
        }
    }
    Ok(())
}

/// A sweep cell that could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFailure {
    pub model: ModelKind,
    #[serde(rename = "T_train")]
    pub t_train: usize,
    pub beta: f64,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub failures: Vec<SweepFailure>,
}

/// Config for one `(T_train, β-factor)` cell: `β = factor · T_train`, own
/// output directory.
pub fn sweep_cell(base: &ExperimentConfig, t_train: usize, factor: f64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.train.t_train = t_train;
    cfg.train.beta = factor * t_train as f64;
    cfg.run.out_dir = base.run.out_dir.join("sweep").join(format!("T{t_train}_b{factor}"));
    cfg
}

/// Trains and evaluates every grid cell (cells in parallel). Failed or
/// diverged cells are recorded and the sweep continues.
pub fn run_sweep(
    base: &ExperimentConfig,
    t_trains: &[usize],
    factors: &[f64],
    save_checkpoints: bool,
) -> Result<SweepReport> {
    if t_trains.is_empty() || factors.is_empty() {
        return Err(FondError::InvalidArgument("sweep lists must be non-empty".into()));
    }
    let (train_set, test_set) = load_data(base)?;
    let cells: Vec<ExperimentConfig> = t_trains
        .iter()
        .flat_map(|&t| factors.iter().map(move |&f| (t, f)))
        .map(|(t, f)| sweep_cell(base, t, f))
        .collect();
    let results: Vec<std::result::Result<SweepPoint, SweepFailure>> = cells
        .par_iter()
        .map(|cfg| {
            let fail = |e: FondError| SweepFailure {
                model: cfg.model.kind,
                t_train: cfg.train.t_train,
                beta: cfg.train.beta,
                error: e.to_string(),
            };
            let run = train_experiment(cfg, &train_set, &mut |_, _| Ok(())).map_err(fail)?;
            if let Some(e) = run.diverged {
                return Err(fail(e));
            }
            if save_checkpoints {
                run.checkpoint
                    .save(cfg.run.out_dir.join(CHECKPOINT_FILE))
                    .map_err(fail)?;
            }
            let opts = EvalOptions {
                map_decode: MapDecode::Both,
                ..EvalOptions::from_config(cfg)
            };
            let rep = evaluate(&run.checkpoint, &test_set.samples, &opts).map_err(fail)?;
            let s = rep.metric("sampled").expect("both decodes");
            let m = rep.metric("map").expect("both decodes");
            Ok(SweepPoint {
                model: cfg.model.kind,
                t_train: cfg.train.t_train,
                beta: cfg.train.beta,
                r2: s.r2,
                sparsity: s.sparsity,
                map_r2: m.r2,
                distance: distance_to_optimum(s.r2, s.sparsity),
                converge_t: s.converge_t,
            })
        })
        .collect();
    let mut report = SweepReport::default();
    for r in results {
        match r {
            Ok(p) => report.points.push(p),
            Err(f) => report.failures.push(f),
        }
    }
    Ok(report)
}

/// `fond sweep <cfg>`: writes `sweep.csv`, `sweep_failures.csv` and
/// `sweep.svg` into `run.out_dir`.
pub fn cmd_sweep(config_path: &Path, t_trains: &[usize], factors: &[f64], seed: Option<u64>) -> Result<SweepReport> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    let report = run_sweep(&cfg, t_trains, factors, true)?;
    let out = &cfg.run.out_dir;
    write_csv(
        &out.join("sweep.csv"),
        &["model", "T_train", "beta", "r2", "sparsity", "map_r2", "distance", "converge_t"],
        &report.points,
    )?;
    write_csv(
        &out.join("sweep_failures.csv"),
        &["model", "T_train", "beta", "error"],
        &report.failures,
    )?;
    write_atomic(&out.join("sweep.svg"), svg::sweep_scatter(&report.points).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ContrastOptions {
    pub contrasts: Vec<f64>,
    pub n_trials: usize,
    /// Number of best-tuned units to record.
    pub n_units: usize,
    pub orientations: Vec<f64>,
    /// Spatial frequencies in cycles per pixel.
    pub sfs: Vec<f64>,
    pub frames_per_cycle: usize,
    pub cycles: f64,
    pub probe_trials: usize,
    pub seed: u64,
}

impl Default for ContrastOptions {
    fn default() -> Self {
        ContrastOptions {
            contrasts: vec![0.15, 0.25, 0.5, 1.0],
            n_trials: 500,
            n_units: 20,
            orientations: (0..8).map(|i| i as f64 * PI / 8.0).collect(),
            sfs: vec![1.0 / 16.0, 1.0 / 8.0, 3.0 / 16.0, 1.0 / 4.0],
            frames_per_cycle: 48,
            cycles: 1.0,
            probe_trials: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsthRow {
    pub unit: usize,
    pub contrast: f64,
    pub t_cycles: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub unit: usize,
    pub contrast: f64,
    /// Smoothed-PSTH peak time in cycles, −1 if the unit never fired.
    pub peak_cycles: f64,
    /// First time the smoothed PSTH exceeds 20% of its peak, −1 if silent.
    pub onset_cycles: f64,
}

#[derive(Debug, Clone)]
pub struct ContrastReport {
    pub units: Vec<UnitTuning>,
    pub psth: Vec<PsthRow>,
    pub latency: Vec<LatencyRow>,
    /// Per contrast, the peak time averaged over units that fired.
    pub mean_peak: Vec<(f64, f64)>,
}

/// Phase that puts a unit's feedforward drive at its trough on frame 0.
fn trough_phase(params: &GenerativeParams, unit: usize, spec: &GratingSpec) -> Result<f64> {
    let phi = params
        .decoder
        .dictionary()
        .ok_or_else(|| FondError::InvalidArgument("contrast needs a linear dictionary".into()))?;
    let prec = params.precision();
    let (s, c) = (grating(&spec.with_phase(0.0), 0), grating(&spec.with_phase(PI / 2.0), 0));
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..phi.rows() {
        let w = phi.get(i, unit) * prec.data()[i];
        a += w * s.data()[i];
        b += w * c.data()[i];
    }
    // drive(φ) = a cos φ + b sin φ
    Ok(b.atan2(a) + PI)
}

/// Finds the best-tuned units, then presents each with its preferred
/// drifting grating at every contrast and records spike PSTHs.
pub fn run_contrast(ck: &Checkpoint, opts: &ContrastOptions) -> Result<ContrastReport> {
    let params = &ck.params;
    let kind = ck.kind();
    if kind != ModelKind::Ipvae {
        return Err(FondError::InvalidArgument(format!(
            "contrast needs a Poisson model, not {kind}"
        )));
    }
    if opts.n_trials == 0 || opts.frames_per_cycle == 0 || opts.contrasts.is_empty() {
        return Err(FondError::InvalidArgument("contrast needs trials, frames and contrasts".into()));
    }
    let m = params.input_dim();
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(FondError::Shape(format!("input dim {m} is not a square image")));
    }
    let tf = 1.0 / opts.frames_per_cycle as f64;
    let steps = ((opts.cycles * opts.frames_per_cycle as f64).round() as usize).max(1);
    let probe = ProbeOptions {
        steps,
        temporal_freq: tf,
        trials: opts.probe_trials.max(1),
        seed: child_seed(opts.seed, CONTRAST_TAG),
    };
    let mut tuned = tuning_probe(params, kind, &opts.orientations, &opts.sfs, &probe)?;
    if tuned.iter().all(|u| !(u.selectivity > 1e-12)) {
        return Err(FondError::InvalidArgument(
            "untuned model: no unit prefers any grating over the grid mean".into(),
        ));
    }
    tuned.sort_by(|a, b| b.selectivity.total_cmp(&a.selectivity).then(a.unit.cmp(&b.unit)));
    tuned.truncate(opts.n_units.max(1));

    let seed = child_seed(opts.seed, CONTRAST_TAG + 1);
    let per_unit: Vec<Result<(Vec<PsthRow>, Vec<LatencyRow>)>> = tuned
        .par_iter()
        .map(|u| {
            let base = GratingSpec::new(side, u.theta, u.sf, tf).with_frames(steps);
            let phase = trough_phase(params, u.unit, &base)?;
            let mut psth_rows = Vec::new();
            let mut lat_rows = Vec::new();
            for &contrast in &opts.contrasts {
                let spec = base.with_phase(phase).with_contrast(contrast);
                let (rows, run) = (opts.n_trials, RunOptions { record: false, ..RunOptions::new(steps, 1.0) });
                // same noise keys at every contrast
                let sampler = Sampler::keyed_rows(seed, (0..rows as u64).collect());
                let mut spikes = Tensor::zeros(&[rows, steps]);
                let mut frame = |t: usize| Ok(Tensor::broadcast_rows(&grating(&spec, t), rows));
                let mut observe = |_: &Tensor, s: &InferenceState| {
                    let t = s.t - 1;
                    for r in 0..rows {
                        spikes.set(r, t, s.z.get(r, u.unit));
                    }
                    Ok(())
                };
                run_stimulus(rows, &mut frame, params, kind, &run, &sampler, &mut observe)?;
                let p = psth(&spikes, 1)?;
                for t in 0..p.mean.len() {
                    psth_rows.push(PsthRow {
                        unit: u.unit,
                        contrast,
                        t_cycles: t as f64 * tf,
                        mean: p.mean[t],
                        std: p.std[t],
                    });
                }
                let cyc = |b: f64| if b < 0.0 { -1.0 } else { b * tf };
                lat_rows.push(LatencyRow {
                    unit: u.unit,
                    contrast,
                    peak_cycles: cyc(p.peak),
                    onset_cycles: cyc(p.onset),
                });
            }
            Ok((psth_rows, lat_rows))
        })
        .collect();
    let mut psth_rows = Vec::new();
    let mut latency = Vec::new();
    for r in per_unit {
        let (p, l) = r?;
        psth_rows.extend(p);
        latency.extend(l);
    }
    let mean_peak = opts
        .contrasts
        .iter()
        .map(|&c| {
            let v: Vec<f64> = latency
                .iter()
                .filter(|l| l.contrast == c && l.peak_cycles >= 0.0)
                .map(|l| l.peak_cycles)
                .collect();
            let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            (c, mean)
        })
        .collect();
    Ok(ContrastReport {
        units: tuned,
        psth: psth_rows,
        latency,
        mean_peak,
    })
}

/// Unit-averaged PSTH curve per contrast.
pub fn contrast_curves(report: &ContrastReport, contrasts: &[f64]) -> Vec<svg::Curve> {
    contrasts
        .iter()
        .map(|&c| {
            let rows: Vec<&PsthRow> = report.psth.iter().filter(|r| r.contrast == c).collect();
            let mut t: Vec<f64> = rows.iter().map(|r| r.t_cycles).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            let (mut mean, mut std) = (vec![0.0; t.len()], vec![0.0; t.len()]);
            let units = report.units.len().max(1) as f64;
            for r in &rows {
                if let Some(i) = t.iter().position(|&v| v == r.t_cycles) {
                    mean[i] += r.mean / units;
                    std[i] += r.std / units;
                }
            }
            svg::Curve {
                label: format!("{:.0}% contrast", c * 100.0),
                t,
                mean,
                std,
            }
        })
        .collect()
}

/// `fond contrast <ckpt>`: writes `psth.csv`, `latency.csv` and `psth.svg`
/// next to the checkpoint.
pub fn cmd_contrast(ckpt_path: &Path, opts: &ContrastOptions) -> Result<ContrastReport> {
    let ck = Checkpoint::load(ckpt_path)?;
    let report = run_contrast(&ck, opts)?;
    let dir = ckpt_path.parent().unwrap_or(Path::new("."));
    write_csv(&dir.join("psth.csv"), &["unit", "contrast", "t_cycles", "mean", "std"], &report.psth)?;
    write_csv(
        &dir.join("latency.csv"),
        &["unit", "contrast", "peak_cycles", "onset_cycles"],
        &report.latency,
    )?;
    let curves = contrast_curves(&report, &opts.contrasts);
    write_atomic(&dir.join("psth.svg"), svg::psth_plot(&curves).as_bytes())?;
    Ok(report)
}

/// Writes a header row and one row per record, atomically.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| FondError::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}
