//! Metrics: reconstruction quality, sparsity, convergence detection,
//! PSTH/latency statistics, a linear probe and a Fourier orientation score.

use crate::dynamics::{InferenceState, Latent, Mode, ModelKind};
use crate::error::{FondError, Result};
use crate::model::{GenerativeParams, Prior};
use crate::numerics::{Adamax, Tensor};
use serde::{Deserialize, Serialize};

/// One cell of a `(T_train, β)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub model: ModelKind,
    #[serde(rename = "T_train")]
    pub t_train: usize,
    pub beta: f64,
    pub r2: f64,
    pub sparsity: f64,
    pub map_r2: f64,
    pub distance: f64,
    pub converge_t: usize,
}

/// `1 − SS_res/SS_tot`.
pub fn r_squared(x: &[f64], xhat: &[f64]) -> Result<f64> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(FondError::Shape(format!(
            "r_squared: {} vs {}",
            x.len(),
            xhat.len()
        )));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let ss_tot: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(FondError::InvalidArgument("r_squared of a constant signal".into()));
    }
    let ss_res: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Fraction of exact zeros.
pub fn sparsity_fraction(z: &[f64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter().filter(|&&v| v == 0.0).count() as f64 / z.len() as f64
}

/// Mean squared residual per dimension.
pub fn per_dim_mse(x: &[f64], xhat: &[f64]) -> Result<f64> {
    if x.len() != xhat.len() || x.is_empty() {
        return Err(FondError::Shape("per_dim_mse: length mismatch".into()));
    }
    Ok(x.iter().zip(xhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// Euclidean distance of `(R², sparsity)` from the ideal `(1, 1)`.
pub fn distance_to_optimum(r2: f64, sparsity: f64) -> f64 {
    ((1.0 - r2).powi(2) + (1.0 - sparsity).powi(2)).sqrt()
}

/// Norm of the update direction at the current state, averaged over rows.
///
/// Poisson: `u̇ = J(z)·[(x − f(z))/σ²] − β(u − u₀)` with `z` the state's last
/// draw. Gaussian: `µ̇` with the same convention. `β = 0` gives the online
/// direction.
pub fn grad_norm(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    beta: f64,
) -> Result<f64> {
    let xb = x.as_batch();
    let cache = params.decode_batch(&state.z)?;
    let e = params.weighted_residual(&xb, &cache.xhat)?;
    let mut fb = params.feedback_batch(&cache, &e)?;
    let k = params.latent_dim();
    match (&state.latent, &params.prior) {
        (Latent::Poisson { u }, Prior::Poisson(p)) => {
            for (i, f) in fb.data_mut().iter_mut().enumerate() {
                *f -= beta * (u.data()[i] - p.u.data()[i % k]);
            }
        }
        (Latent::Gaussian { mu, xi }, Prior::Gaussian(g)) => {
            let relu = params.decoder.kind() == crate::model::DecoderKind::LinearRelu;
            for (i, f) in fb.data_mut().iter_mut().enumerate() {
                if relu && state.z.data()[i] <= 0.0 {
                    *f = 0.0;
                }
                let s = xi.data()[i];
                let w = (2.0 * (s - g.xi.data()[i % k])).exp();
                *f = (2.0 * s).exp() * *f - beta * w * (mu.data()[i] - g.mu.data()[i % k]);
            }
        }
        _ => {
            return Err(FondError::InvalidArgument(
                "grad_norm needs a variational state matching the prior".into(),
            ))
        }
    }
    let rows = fb.rows().max(1);
    Ok(fb
        .data()
        .chunks_exact(k)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64)
}

/// Mode-aware wrapper used by the CLI: the leak only counts in static mode.
pub fn grad_norm_for(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
) -> Result<f64> {
    let beta = match mode {
        Mode::Online => 0.0,
        Mode::Static(b) => b,
    };
    grad_norm(state, x, params, beta)
}

pub const CONVERGENCE_WINDOW: usize = 60;
pub const CONVERGENCE_TOL: f64 = 1e-5;
pub const CONVERGENCE_RUN: usize = 5;

/// First time a trace has stayed flat: slide a least-squares line over every
/// `window`-step segment, call it flat when `|slope| < tol`, find the first
/// start `k` of `consecutive` flat windows and return `k + window`. Returns
/// the trace length if no such run exists.
pub fn detect_convergence(
    trace: &[f64],
    window: usize,
    tol: f64,
    consecutive: usize,
) -> Result<usize> {
    if window < 2 || trace.len() < window {
        return Err(FondError::InvalidArgument(format!(
            "trace of length {} is shorter than window {window}",
            trace.len()
        )));
    }
    let n = window as f64;
    let tau_mean = (n - 1.0) / 2.0;
    let denom: f64 = (0..window).map(|j| (j as f64 - tau_mean).powi(2)).sum();
    let mut run = 0usize;
    for i in 0..=trace.len() - window {
        let y = &trace[i..i + window];
        let y_mean = y.iter().sum::<f64>() / n;
        let num: f64 = y
            .iter()
            .enumerate()
            .map(|(j, v)| (j as f64 - tau_mean) * (v - y_mean))
            .sum();
        if (num / denom).abs() < tol {
            run += 1;
            if run == consecutive.max(1) {
                return Ok(i + 1 - run + window);
            }
        } else {
            run = 0;
        }
    }
    Ok(trace.len())
}

/// [`detect_convergence`] with the default window 60, tolerance 1e-5 and
/// five consecutive flat windows.
pub fn convergence_index(trace: &[f64]) -> Result<usize> {
    detect_convergence(trace, CONVERGENCE_WINDOW, CONVERGENCE_TOL, CONVERGENCE_RUN)
}

/// Trial-averaged response.
#[derive(Debug, Clone, PartialEq)]
pub struct Psth {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_trials: usize,
    /// Bin of the smoothed peak, or −1 when the response is identically zero.
    pub peak: f64,
    /// First bin whose smoothed mean exceeds 20% of the peak, or −1.
    pub onset: f64,
}

pub const ONSET_FRACTION: f64 = 0.2;

/// Centered 3-bin moving average, truncated at the edges.
pub fn smooth3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// PSTH of `trials: [n_trials × T]` with `bin` time steps per bin.
pub fn psth(trials: &Tensor, bin: usize) -> Result<Psth> {
    let tr = trials.as_batch();
    let n = tr.rows();
    if n == 0 || bin == 0 {
        return Err(FondError::InvalidArgument("psth needs trials and bin ≥ 1".into()));
    }
    let nbins = tr.cols().div_ceil(bin);
    let mut binned = Tensor::zeros(&[n, nbins]);
    for i in 0..n {
        for (t, &v) in tr.row(i).iter().enumerate() {
            let b = t / bin;
            let w = (bin.min(tr.cols() - b * bin)) as f64;
            binned.row_mut(i)[b] += v / w;
        }
    }
    let mean: Vec<f64> = binned.sum_rows().data().iter().map(|s| s / n as f64).collect();
    let std: Vec<f64> = (0..nbins)
        .map(|b| {
            let var = (0..n).map(|i| (binned.get(i, b) - mean[b]).powi(2)).sum::<f64>() / n as f64;
            var.sqrt()
        })
        .collect();
    let sm = smooth3(&mean);
    let (peak, onset) = peak_and_onset(&sm);
    Ok(Psth {
        mean,
        std,
        n_trials: n,
        peak,
        onset,
    })
}

/// Argmax (first on ties) and 20%-of-peak onset of an already smoothed curve.
pub fn peak_and_onset(sm: &[f64]) -> (f64, f64) {
    let mut best = 0usize;
    for (i, &v) in sm.iter().enumerate() {
        if v > sm[best] {
            best = i;
        }
    }
    if sm.is_empty() || sm[best] <= 0.0 {
        return (-1.0, -1.0);
    }
    let thr = ONSET_FRACTION * sm[best];
    let onset = sm.iter().position(|&v| v > thr).unwrap_or(best);
    (best as f64, onset as f64)
}

pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_EPOCHS: usize = 200;
const PROBE_LR: f64 = 0.05;

/// Multinomial logistic regression on the first `train_frac` of the rows,
/// scored on the rest. Features are standardized with training statistics;
/// full-batch Adamax with ℓ2 penalty 1e-4 for 200 epochs.
pub fn probe_classifier(latents: &Tensor, labels: &[usize], train_frac: f64) -> Result<f64> {
    let z = latents.as_batch();
    let n = z.rows();
    if labels.len() != n {
        return Err(FondError::Shape("probe: labels vs latents".into()));
    }
    let n_train = ((n as f64) * train_frac).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(FondError::InvalidArgument("probe: empty train or test split".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let train_classes: std::collections::BTreeSet<_> = labels[..n_train].iter().collect();
    if train_classes.len() < 2 {
        return Err(FondError::InvalidArgument("probe: single-class training split".into()));
    }
    let d = z.cols();
    let idx_train: Vec<usize> = (0..n_train).collect();
    let idx_test: Vec<usize> = (n_train..n).collect();
    let mut xtr = z.select_rows(&idx_train);
    let mut xte = z.select_rows(&idx_test);
    let mean = xtr.sum_rows().scale(1.0 / n_train as f64);
    let mut sd = vec![0.0; d];
    for i in 0..n_train {
        for (j, s) in sd.iter_mut().enumerate() {
            *s += (xtr.get(i, j) - mean.data()[j]).powi(2);
        }
    }
    let sd: Vec<f64> = sd
        .into_iter()
        .map(|s| {
            let v = (s / n_train as f64).sqrt();
            if v > 1e-12 {
                v
            } else {
                1.0
            }
        })
        .collect();
    for t in [&mut xtr, &mut xte] {
        for i in 0..t.rows() {
            for (j, v) in t.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean.data()[j]) / sd[j];
            }
        }
    }

    let mut w = Tensor::zeros(&[d, classes]);
    let mut b = Tensor::zeros(&[classes]);
    let mut opt = Adamax::new(&[&w, &b], 0.9, 0.999);
    let ytr = &labels[..n_train];
    for _ in 0..PROBE_EPOCHS {
        let logits = logits(&xtr, &w, &b)?;
        let mut dlog = softmax_rows(&logits);
        for (i, &y) in ytr.iter().enumerate() {
            let v = dlog.get(i, y) - 1.0;
            dlog.set(i, y, v);
        }
        dlog.map_inplace(|v| v / n_train as f64);
        let mut dw = crate::numerics::Tensor::zeros(&[d, classes]);
        crate::numerics::gemm(1.0, &xtr, true, &dlog, false, 0.0, &mut dw)?;
        dw.axpy(2.0 * PROBE_L2, &w)?;
        let db = dlog.sum_rows();
        opt.step(vec![&mut w, &mut b], &[dw, db], PROBE_LR)?;
    }
    let lt = logits(&xte, &w, &b)?;
    let correct = (0..lt.rows())
        .filter(|&i| argmax(lt.row(i)) == labels[n_train + i])
        .count();
    Ok(correct as f64 / lt.rows() as f64)
}

fn logits(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::broadcast_rows(b, x.rows());
    crate::numerics::gemm(1.0, x, false, w, false, 1.0, &mut out)?;
    Ok(out)
}

fn softmax_rows(l: &Tensor) -> Tensor {
    let mut out = l.clone();
    let c = l.cols();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Power spectrum of a `side×side` image via a direct 2-D DFT.
pub fn power_spectrum(img: &[f64], side: usize) -> Result<Vec<f64>> {
    if img.len() != side * side || side == 0 {
        return Err(FondError::Shape(format!("{} pixels for side {side}", img.len())));
    }
    let tw: Vec<(f64, f64)> = (0..side)
        .map(|k| {
            let a = -2.0 * std::f64::consts::PI * k as f64 / side as f64;
            (a.cos(), a.sin())
        })
        .collect();
    // rows first, then columns
    let mut tmp = vec![(0.0, 0.0); side * side];
    for y in 0..side {
        for kx in 0..side {
            let (mut re, mut im) = (0.0, 0.0);
            for x in 0..side {
                let (c, s) = tw[(kx * x) % side];
                let v = img[y * side + x];
                re += v * c;
                im += v * s;
            }
            tmp[y * side + kx] = (re, im);
        }
    }
    let mut power = vec![0.0; side * side];
    for kx in 0..side {
        for ky in 0..side {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..side {
                let (c, s) = tw[(ky * y) % side];
                let (a, b) = tmp[y * side + kx];
                re += a * c - b * s;
                im += a * s + b * c;
            }
            power[ky * side + kx] = re * re + im * im;
        }
    }
    Ok(power)
}

pub const ORIENTATION_BINS: usize = 8;

/// Orientation selectivity of an image: the non-DC power spectrum is pooled
/// into 8 orientation bands of width π/8 (by the angle of the signed
/// frequency vector), and the strongest band's energy is divided by the mean
/// band energy. An oriented grating or Gabor puts nearly everything into one
/// band; white noise and isotropic blobs stay near 1. Flat images score 0.
pub fn oriented_energy_ratio(img: &[f64], side: usize) -> Result<f64> {
    let mean = img.iter().sum::<f64>() / img.len().max(1) as f64;
    let centered: Vec<f64> = img.iter().map(|v| v - mean).collect();
    let p = power_spectrum(&centered, side)?;
    let mut bands = [0.0; ORIENTATION_BINS];
    let signed = |k: usize| if k > side / 2 { k as f64 - side as f64 } else { k as f64 };
    for ky in 0..side {
        for kx in 0..side {
            if kx == 0 && ky == 0 {
                continue;
            }
            let theta = signed(ky).atan2(signed(kx)).rem_euclid(std::f64::consts::PI);
            let b = ((theta / std::f64::consts::PI * ORIENTATION_BINS as f64).round() as usize)
                % ORIENTATION_BINS;
            bands[b] += p[ky * side + kx];
        }
    }
    let band_mean = bands.iter().sum::<f64>() / ORIENTATION_BINS as f64;
    if band_mean <= 0.0 {
        return Ok(0.0);
    }
    Ok(bands.iter().cloned().fold(0.0, f64::max) / band_mean)
}

pub const ORIENTED_THRESHOLD: f64 = 2.0;

/// Whether a dictionary column has dominant oriented band-pass structure.
pub fn is_oriented(img: &[f64], side: usize) -> Result<bool> {
    Ok(oriented_energy_ratio(img, side)? > ORIENTED_THRESHOLD)
}
