//! Drifting sinusoidal gratings and the orientation / spatial-frequency
//! tuning probe used to pick well-tuned units.

use std::f64::consts::PI;

use crate::dynamics::{run_stimulus, Decode, ModelKind, RunOptions, Sampler};
use crate::error::{FondError, Result};
use crate::model::GenerativeParams;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GratingSpec {
    /// Side length in pixels.
    pub size: usize,
    /// Drift direction in radians.
    pub orientation: f64,
    /// Cycles per pixel.
    pub spatial_freq: f64,
    /// Cycles per frame.
    pub temporal_freq: f64,
    pub contrast: f64,
    pub n_frames: usize,
    /// Phase offset in radians.
    pub phase: f64,
}

impl GratingSpec {
    pub fn new(size: usize, orientation: f64, spatial_freq: f64, temporal_freq: f64) -> Self {
        GratingSpec {
            size,
            orientation,
            spatial_freq,
            temporal_freq,
            contrast: 1.0,
            n_frames: 1,
            phase: 0.0,
        }
    }

    pub fn with_contrast(mut self, contrast: f64) -> Self {
        self.contrast = contrast;
        self
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn with_frames(mut self, n_frames: usize) -> Self {
        self.n_frames = n_frames;
        self
    }

    /// Frame index expressed in grating cycles.
    pub fn cycles(&self, frame: usize) -> f64 {
        frame as f64 * self.temporal_freq
    }
}

/// One frame, flattened row-major; `x` is the column and `y` the row.
pub fn grating(spec: &GratingSpec, frame: usize) -> Tensor {
    let n = spec.size;
    let (s, c) = spec.orientation.sin_cos();
    let drift = spec.temporal_freq * frame as f64;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let arg = 2.0 * PI * (spec.spatial_freq * (x as f64 * c + y as f64 * s) - drift) + spec.phase;
            out.push(spec.contrast * arg.sin());
        }
    }
    Tensor::from_vec(out)
}

/// Grid probe settings.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    /// Inference steps per stimulus.
    pub steps: usize,
    pub temporal_freq: f64,
    /// Repeats per grid point (distinct noise keys, same phases).
    pub trials: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            steps: 48,
            temporal_freq: 1.0 / 24.0,
            trials: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitTuning {
    pub unit: usize,
    pub theta: f64,
    pub sf: f64,
    pub theta_idx: usize,
    pub sf_idx: usize,
    /// Time-averaged rate at the preferred grid point.
    pub response: f64,
    /// Preferred response minus the grid mean.
    pub selectivity: f64,
}

/// Runs contrast-1 drifting gratings over the `orientations × sfs` grid and
/// reports each unit's preferred grid point. Grid points are ordered
/// orientation-major; ties go to the lowest index.
pub fn tuning_probe(
    params: &GenerativeParams,
    kind: ModelKind,
    orientations: &[f64],
    sfs: &[f64],
    opts: &ProbeOptions,
) -> Result<Vec<UnitTuning>> {
    let grid = tuning_grid(params, kind, orientations, sfs, opts)?;
    let (g, k) = (grid.rows(), grid.cols());
    let mut out = Vec::with_capacity(k);
    for unit in 0..k {
        let mut best = 0;
        let mut mean = 0.0;
        for p in 0..g {
            let v = grid.get(p, unit);
            mean += v;
            if v > grid.get(best, unit) {
                best = p;
            }
        }
        mean /= g as f64;
        let (ti, si) = (best / sfs.len(), best % sfs.len());
        let response = grid.get(best, unit);
        out.push(UnitTuning {
            unit,
            theta: orientations[ti],
            sf: sfs[si],
            theta_idx: ti,
            sf_idx: si,
            response,
            selectivity: response - mean,
        });
    }
    Ok(out)
}

/// Time- and trial-averaged mean code per grid point, `[G × K]`.
pub fn tuning_grid(
    params: &GenerativeParams,
    kind: ModelKind,
    orientations: &[f64],
    sfs: &[f64],
    opts: &ProbeOptions,
) -> Result<Tensor> {
    if orientations.is_empty() || sfs.is_empty() || opts.trials == 0 {
        return Err(FondError::InvalidArgument("empty tuning grid".into()));
    }
    let m = params.input_dim();
    let side = (m as f64).sqrt().round() as usize;
    if side * side != m {
        return Err(FondError::Shape(format!("input dim {m} is not a square image")));
    }
    let specs: Vec<GratingSpec> = orientations
        .iter()
        .flat_map(|&th| sfs.iter().map(move |&f| (th, f)))
        .map(|(th, f)| GratingSpec::new(side, th, f, opts.temporal_freq).with_frames(opts.steps))
        .collect();
    let g = specs.len();
    let rows = g * opts.trials;
    let k = params.latent_dim();
    let ids: Vec<u64> = (0..rows as u64).map(|i| i % opts.trials as u64).collect();
    let sampler = Sampler::keyed_rows(opts.seed, ids);
    let run = RunOptions {
        record: false,
        decode: Decode::Map,
        ..RunOptions::new(opts.steps, 1.0)
    };
    let mut frame = |t: usize| {
        let mut x = Tensor::zeros(&[rows, m]);
        for (p, spec) in specs.iter().enumerate() {
            let img = grating(spec, t);
            for r in 0..opts.trials {
                x.row_mut(p * opts.trials + r).copy_from_slice(img.data());
            }
        }
        Ok(x)
    };
    let mut acc = Tensor::zeros(&[rows, k]);
    let mut observe = |_: &Tensor, s: &crate::dynamics::InferenceState| acc.axpy(1.0, &s.map);
    run_stimulus(rows, &mut frame, params, kind, &run, &sampler, &mut observe)?;
    let norm = 1.0 / (opts.steps * opts.trials) as f64;
    let mut grid = Tensor::zeros(&[g, k]);
    for p in 0..g {
        for r in 0..opts.trials {
            for j in 0..k {
                let v = grid.get(p, j) + acc.get(p * opts.trials + r, j) * norm;
                grid.set(p, j, v);
            }
        }
    }
    Ok(grid)
}
