//! Learning to infer: the sequence free energy of an unrolled inference run,
//! its exact reverse-mode gradient, and the training loop.
//!
//! The training loss of a batch is the sum over unrolled steps of
//!
//! ```text
//! F_t = ½‖(x − f(z_t))/σ‖² + Σ_j log σ_j + β·KL(q_{t+1} ‖ q_t)
//! ```
//!
//! averaged over samples. The `log σ` term is the Gaussian log-normalizer; it
//! only matters when `σ` is learned. Gradients flow through every step of the
//! unroll (full BPTT). Poisson draws are treated as identity in the reverse
//! pass (`∂z/∂r := I`); Gaussian draws are differentiated exactly through
//! `z = µ + e^ξ ε` with `ε` held fixed.
//!
//! PC and LCA have no variational posterior; they learn from the energy at the
//! final inference state (an EM-style update), and LCA renormalizes its
//! dictionary columns after every step.

use crate::distributions::{gaussian_kl_scalar, poisson_kl_scalar};
use crate::dynamics::{
    gaussian_core, poisson_core, poisson_core_given, run_inference, GaussianCore, InferenceState,
    InferenceTrace, KlTarget, Latent, Mode, ModelKind, PoissonCore, RunOptions, Sampler,
};
use crate::error::{FondError, Result};
use crate::model::{GenerativeParams, Gradients, Prior};
use crate::numerics::rng::child_seed;
use crate::numerics::{cosine_lr, kl_anneal, temp_anneal, Adamax, Purpose, RngStream, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One step's free energy and its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergy {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `F_t = recon(x, z_t) + β·KL(q_{t+1} ‖ q_t)` for consecutive states of the
/// same run (`next` must be the state produced from `prev`), averaged over
/// rows.
pub fn free_energy_step(
    x: &Tensor,
    prev: &InferenceState,
    next: &InferenceState,
    params: &GenerativeParams,
    beta: f64,
) -> Result<FreeEnergy> {
    let xb = x.as_batch();
    let rows = xb.rows().max(1) as f64;
    let cache = params.decode_batch(&next.z)?;
    let e = params.weighted_residual(&xb, &cache.xhat)?;
    let var = params.log_sigma_x.map(|s| (2.0 * s).exp());
    let m = var.len();
    let recon: f64 = 0.5
        * e.data()
            .chunks_exact(m)
            .map(|r| r.iter().zip(var.data()).map(|(a, v)| a * a * v).sum::<f64>())
            .sum::<f64>();
    let kl = match (&next.latent, &prev.latent) {
        (Latent::Poisson { u: a }, Latent::Poisson { u: b }) => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| poisson_kl_scalar(p, q))
            .sum::<f64>(),
        (Latent::Gaussian { mu: m1, xi: s1 }, Latent::Gaussian { mu: m0, xi: s0 }) => (0..m1.len())
            .map(|i| gaussian_kl_scalar(m1.data()[i], s1.data()[i], m0.data()[i], s0.data()[i]))
            .sum::<f64>(),
        _ => {
            return Err(FondError::InvalidArgument(
                "free energy needs consecutive variational states".into(),
            ))
        }
    };
    Ok(FreeEnergy {
        total: (recon + beta * kl) / rows,
        recon: recon / rows,
        kl: kl / rows,
    })
}

/// `Σ_t F_t` over a recorded trace.
pub fn sequence_free_energy(trace: &InferenceTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(FondError::InvalidArgument("empty trace".into()));
    }
    Ok(trace.records.iter().map(|r| r.free_energy).sum())
}

/// Options for one unrolled forward/backward pass.
#[derive(Debug, Clone)]
pub struct BpttOptions {
    pub steps: usize,
    pub beta: f64,
    pub mode: Mode,
    pub kl_target: KlTarget,
    pub sampler: Sampler,
    pub lca_lambda: f64,
    pub lca_tau: f64,
}

impl BpttOptions {
    pub fn new(steps: usize, beta: f64, sampler: Sampler) -> Self {
        BpttOptions {
            steps,
            beta,
            mode: Mode::Online,
            kl_target: KlTarget::Rolling,
            sampler,
            lca_lambda: 0.5,
            lca_tau: 100.0,
        }
    }
}

/// Batch-summed loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub recon: f64,
    pub log_norm: f64,
    pub kl: f64,
}

/// Batch-averaged loss summed over steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

enum TapeStep {
    Poisson(PoissonCore),
    Gaussian(GaussianCore),
}

/// Everything the reverse pass needs from an unrolled forward pass.
pub struct UnrollTape {
    kind: ModelKind,
    x: Tensor,
    init: Latent,
    steps: Vec<TapeStep>,
    losses: Vec<StepLoss>,
    beta: f64,
    mode: Mode,
    kl_target: KlTarget,
}

impl UnrollTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn step_losses(&self) -> &[StepLoss] {
        &self.losses
    }

    /// Batch-summed total loss.
    pub fn total(&self) -> f64 {
        self.losses
            .iter()
            .map(|l| l.recon + l.log_norm + self.beta * l.kl)
            .sum()
    }

    /// Recorded sampled codes, one `[B×K]` tensor per step.
    pub fn codes(&self) -> Vec<&Tensor> {
        self.steps
            .iter()
            .map(|s| match s {
                TapeStep::Poisson(c) => &c.z,
                TapeStep::Gaussian(c) => &c.z,
            })
            .collect()
    }

    /// Reruns the forward pass with the recorded draws and returns the
    /// batch-summed loss; equals [`total`](Self::total) bit for bit.
    pub fn replay(&self, params: &GenerativeParams) -> Result<f64> {
        let mut total = 0.0;
        let mut latent = self.init.clone();
        for step in &self.steps {
            let (next, loss) = match (step, &latent) {
                (TapeStep::Poisson(c), Latent::Poisson { u }) => {
                    let r = u.map(f64::exp);
                    let n = poisson_core_given(u, r, c.z.clone(), &self.x, params, self.mode)?;
                    let l = poisson_step_loss(params, u, &n, self.kl_target);
                    (Latent::Poisson { u: n.u_next }, l)
                }
                (TapeStep::Gaussian(c), Latent::Gaussian { mu, xi }) => {
                    let relu = self.kind == ModelKind::Igrelu;
                    let n = gaussian_core(mu, xi, c.eps.clone(), &self.x, params, self.mode, relu)?;
                    let l = gaussian_step_loss(params, mu, xi, &n, self.kl_target);
                    (
                        Latent::Gaussian {
                            mu: n.mu_next,
                            xi: n.xi_next,
                        },
                        l,
                    )
                }
                _ => return Err(FondError::InvalidArgument("tape does not match state".into())),
            };
            total += loss.recon + loss.log_norm + self.beta * loss.kl;
            latent = next;
        }
        Ok(total)
    }
}

fn half_weighted_sq(params: &GenerativeParams, e: &Tensor) -> f64 {
    let var = params.log_sigma_x.map(|s| (2.0 * s).exp());
    let m = var.len();
    0.5 * e
        .data()
        .chunks_exact(m)
        .map(|r| r.iter().zip(var.data()).map(|(a, v)| a * a * v).sum::<f64>())
        .sum::<f64>()
}

fn log_norm(params: &GenerativeParams, rows: usize) -> f64 {
    rows as f64 * params.log_sigma_x.sum()
}

fn poisson_step_loss(
    params: &GenerativeParams,
    u: &Tensor,
    c: &PoissonCore,
    target: KlTarget,
) -> StepLoss {
    let k = u.cols();
    let kl = match (target, &params.prior) {
        (KlTarget::FixedPrior, Prior::Poisson(p)) => c
            .u_next
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| poisson_kl_scalar(a, p.u.data()[i % k]))
            .sum(),
        _ => c
            .u_next
            .data()
            .iter()
            .zip(u.data())
            .map(|(&a, &b)| poisson_kl_scalar(a, b))
            .sum(),
    };
    StepLoss {
        recon: half_weighted_sq(params, &c.e),
        log_norm: log_norm(params, u.rows()),
        kl,
    }
}

fn gaussian_step_loss(
    params: &GenerativeParams,
    mu: &Tensor,
    xi: &Tensor,
    c: &GaussianCore,
    target: KlTarget,
) -> StepLoss {
    let k = mu.cols();
    let kl = match (target, &params.prior) {
        (KlTarget::FixedPrior, Prior::Gaussian(g)) => (0..mu.len())
            .map(|i| {
                gaussian_kl_scalar(
                    c.mu_next.data()[i],
                    c.xi_next.data()[i],
                    g.mu.data()[i % k],
                    g.xi.data()[i % k],
                )
            })
            .sum(),
        _ => (0..mu.len())
            .map(|i| {
                gaussian_kl_scalar(c.mu_next.data()[i], c.xi_next.data()[i], mu.data()[i], xi.data()[i])
            })
            .sum(),
    };
    StepLoss {
        recon: half_weighted_sq(params, &c.e),
        log_norm: log_norm(params, mu.rows()),
        kl,
    }
}

/// Forward pass of a variational model, recording the tape.
pub fn unroll(
    x: &Tensor,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &BpttOptions,
) -> Result<UnrollTape> {
    if opts.steps == 0 {
        return Err(FondError::InvalidArgument("T_train must be ≥ 1".into()));
    }
    if !kind.is_variational() {
        return Err(FondError::InvalidArgument(format!("{kind} has no unrolled tape")));
    }
    let xb = x.as_batch();
    let init = InferenceState::initial(params, kind, xb.rows())?.latent;
    if xb.cols() != params.input_dim() {
        return Err(FondError::Shape("unroll: input dimension".into()));
    }
    let mut steps = Vec::with_capacity(opts.steps);
    let mut losses = Vec::with_capacity(opts.steps);
    let mut latent = init.clone();
    for t in 0..opts.steps {
        match &latent {
            Latent::Poisson { u } => {
                let c = poisson_core(u, &xb, params, opts.mode, &opts.sampler, t)?;
                losses.push(poisson_step_loss(params, u, &c, opts.kl_target));
                latent = Latent::Poisson {
                    u: c.u_next.clone(),
                };
                steps.push(TapeStep::Poisson(c));
            }
            Latent::Gaussian { mu, xi } => {
                let eps = opts.sampler.gaussian(mu.shape(), t)?;
                let relu = kind == ModelKind::Igrelu;
                let c = gaussian_core(mu, xi, eps, &xb, params, opts.mode, relu)?;
                losses.push(gaussian_step_loss(params, mu, xi, &c, opts.kl_target));
                latent = Latent::Gaussian {
                    mu: c.mu_next.clone(),
                    xi: c.xi_next.clone(),
                };
                steps.push(TapeStep::Gaussian(c));
            }
            _ => unreachable!("variational kinds have Poisson or Gaussian states"),
        }
    }
    Ok(UnrollTape {
        kind,
        x: xb,
        init,
        steps,
        losses,
        beta: opts.beta,
        mode: opts.mode,
        kl_target: opts.kl_target,
    })
}

/// Shared reverse pass through `fb = J(z)·e`, `e = (x − f(z))/σ²` and the
/// reconstruction/normalizer loss. Returns `∂L/∂z`.
fn backward_likelihood(
    params: &GenerativeParams,
    cache: &crate::model::DecodeCache,
    e: &Tensor,
    d_fb: &Tensor,
    grads: &mut Gradients,
) -> Result<Tensor> {
    let d_e = params.backward_feedback(cache, e, d_fb, grads)?;
    let prec = params.precision();
    let var = params.log_sigma_x.map(|s| (2.0 * s).exp());
    let m = prec.len();
    let rows = e.rows();
    let mut d_xhat = Tensor::zeros(e.shape());
    let mut ds = vec![rows as f64; m];
    for b in 0..rows {
        let er = e.row(b);
        let der = d_e.row(b);
        let out = d_xhat.row_mut(b);
        for j in 0..m {
            out[j] = -der[j] * prec.data()[j] - er[j];
            ds[j] += -2.0 * er[j] * der[j] - er[j] * er[j] * var.data()[j];
        }
    }
    let slot = grads.get_mut("log_sigma_x").expect("log_sigma_x slot");
    for (g, d) in slot.data_mut().iter_mut().zip(&ds) {
        *g += d;
    }
    params.backward_decode(cache, &d_xhat, grads)
}

/// Reverse pass over a tape; returns batch-summed gradients.
pub fn backward(tape: &UnrollTape, params: &GenerativeParams) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params);
    let dt = params.dt();
    let beta = tape.beta;
    let leak = match tape.mode {
        Mode::Online => 0.0,
        Mode::Static(b) => b,
    };
    let fixed = tape.kl_target == KlTarget::FixedPrior;
    let rows = tape.rows();
    let k = params.latent_dim();
    let mut d_log_dt = 0.0;

    match &params.prior {
        Prior::Poisson(prior) => {
            let u0 = &prior.u;
            let mut du0 = vec![0.0; k];
            let mut g = Tensor::zeros(&[rows, k]);
            for t in (0..tape.len()).rev() {
                let TapeStep::Poisson(c) = &tape.steps[t] else {
                    unreachable!()
                };
                let u = match t {
                    0 => match &tape.init {
                        Latent::Poisson { u } => u,
                        _ => unreachable!(),
                    },
                    _ => match &tape.steps[t - 1] {
                        TapeStep::Poisson(p) => &p.u_next,
                        _ => unreachable!(),
                    },
                };
                let mut du = Tensor::zeros(&[rows, k]);
                for i in 0..u.len() {
                    let j = i % k;
                    let un = c.u_next.data()[i];
                    let rn = un.exp();
                    let (ref_u, ref_r) = if fixed {
                        (u0.data()[j], u0.data()[j].exp())
                    } else {
                        (u.data()[i], c.r.data()[i])
                    };
                    g.data_mut()[i] += beta * rn * (un - ref_u);
                    let d_ref = beta * (ref_r - rn);
                    if fixed {
                        du0[j] += d_ref;
                    } else {
                        du.data_mut()[i] += d_ref;
                    }
                    let gi = g.data()[i];
                    d_log_dt += dt * gi * c.dir.data()[i];
                    du.data_mut()[i] += gi * (1.0 - dt * leak);
                    du0[j] += dt * leak * gi;
                }
                let d_fb = g.scale(dt);
                let dz = backward_likelihood(params, &c.cache, &c.e, &d_fb, &mut grads)?;
                for ((d, &dzv), &r) in du.data_mut().iter_mut().zip(dz.data()).zip(c.r.data()) {
                    *d += dzv * r;
                }
                g = du;
            }
            for (j, d) in du0.iter_mut().enumerate() {
                for b in 0..rows {
                    *d += g.get(b, j);
                }
            }
            let slot = grads.get_mut("u0").expect("u0 slot");
            slot.data_mut().copy_from_slice(&du0);
        }
        Prior::Gaussian(prior) => {
            let (mu0, xi0) = (&prior.mu, &prior.xi);
            let mut dmu0 = vec![0.0; k];
            let mut dxi0 = vec![0.0; k];
            let mut gm = Tensor::zeros(&[rows, k]);
            let mut gx = Tensor::zeros(&[rows, k]);
            let relu = tape.kind == ModelKind::Igrelu;
            for t in (0..tape.len()).rev() {
                let TapeStep::Gaussian(c) = &tape.steps[t] else {
                    unreachable!()
                };
                let (mu, xi) = match t {
                    0 => match &tape.init {
                        Latent::Gaussian { mu, xi } => (mu, xi),
                        _ => unreachable!(),
                    },
                    _ => match &tape.steps[t - 1] {
                        TapeStep::Gaussian(p) => (&p.mu_next, &p.xi_next),
                        _ => unreachable!(),
                    },
                };
                let mut dmu = Tensor::zeros(&[rows, k]);
                let mut dxi = Tensor::zeros(&[rows, k]);
                let mut d_fb = Tensor::zeros(&[rows, k]);
                for i in 0..mu.len() {
                    let j = i % k;
                    let (mn, sn) = (c.mu_next.data()[i], c.xi_next.data()[i]);
                    let (mr, sr) = if fixed {
                        (mu0.data()[j], xi0.data()[j])
                    } else {
                        (mu.data()[i], xi.data()[i])
                    };
                    // KL(q_{t+1} ‖ reference)
                    let inv_var = (-2.0 * sr).exp();
                    let ratio = (2.0 * (sn - sr)).exp();
                    let dm = mn - mr;
                    gm.data_mut()[i] += beta * dm * inv_var;
                    gx.data_mut()[i] += beta * (ratio - 1.0);
                    let d_mr = -beta * dm * inv_var;
                    let d_sr = beta * (1.0 - ratio - dm * dm * inv_var);
                    if fixed {
                        dmu0[j] += d_mr;
                        dxi0[j] += d_sr;
                    } else {
                        dmu.data_mut()[i] += d_mr;
                        dxi.data_mut()[i] += d_sr;
                    }

                    let (gmi, gxi) = (gm.data()[i], gx.data()[i]);
                    let (m, s) = (mu.data()[i], xi.data()[i]);
                    let (fb, ep) = (c.fb.data()[i], c.eps.data()[i]);
                    d_log_dt += dt * (gmi * c.dmu.data()[i] + gxi * c.dxi.data()[i]);
                    dmu.data_mut()[i] += gmi;
                    dxi.data_mut()[i] += gxi;
                    let a = dt * gmi;
                    let bb = dt * gxi;
                    let e2s = (2.0 * s).exp();
                    let mut dfb = a * e2s + 0.5 * bb * ep;
                    dxi.data_mut()[i] += 2.0 * a * e2s * fb;
                    if leak != 0.0 {
                        let w = (2.0 * (s - xi0.data()[j])).exp();
                        let off = m - mu0.data()[j];
                        dmu.data_mut()[i] -= a * leak * w;
                        dmu0[j] += a * leak * w;
                        let dw = -a * leak * off - 0.5 * bb * leak;
                        dxi.data_mut()[i] += 2.0 * w * dw;
                        dxi0[j] -= 2.0 * w * dw;
                    }
                    if relu && c.z.data()[i] <= 0.0 {
                        dfb = 0.0;
                    }
                    d_fb.data_mut()[i] = dfb;
                }
                let dz = backward_likelihood(params, &c.cache, &c.e, &d_fb, &mut grads)?;
                for i in 0..dz.len() {
                    let d = dz.data()[i];
                    dmu.data_mut()[i] += d;
                    dxi.data_mut()[i] += d * xi.data()[i].exp() * c.eps.data()[i];
                }
                gm = dmu;
                gx = dxi;
            }
            for j in 0..k {
                for b in 0..rows {
                    dmu0[j] += gm.get(b, j);
                    dxi0[j] += gx.get(b, j);
                }
            }
            grads
                .get_mut("mu0")
                .expect("mu0 slot")
                .data_mut()
                .copy_from_slice(&dmu0);
            grads
                .get_mut("xi0")
                .expect("xi0 slot")
                .data_mut()
                .copy_from_slice(&dxi0);
        }
    }
    grads.get_mut("log_dt").expect("log_dt slot").data_mut()[0] = d_log_dt;
    Ok(grads)
}

/// Gradient of the final-state energy for PC and LCA (batch-summed), plus the
/// loss. PC learns `Φ` and `µ₀`; LCA learns `Φ`.
fn energy_grad(
    x: &Tensor,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &BpttOptions,
) -> Result<(Gradients, StepLoss)> {
    let xb = x.as_batch();
    let mut run = RunOptions::new(opts.steps, 0.0);
    run.record = false;
    run.lca_lambda = opts.lca_lambda;
    run.lca_tau = opts.lca_tau;
    let (state, _) = run_inference(&xb, params, kind, &run, &Sampler::Mean)?;
    let code = match (&state.latent, kind) {
        (Latent::Pc { mu }, ModelKind::Pc) => mu.clone(),
        (Latent::Lca { u }, ModelKind::Lca) => {
            u.map(|v| crate::dynamics::soft_threshold(v, opts.lca_lambda))
        }
        _ => unreachable!("energy_grad is only called for PC and LCA"),
    };
    let cache = params.decode_batch(&code)?;
    let resid = xb.sub(&cache.xhat)?;
    let mut grads = Gradients::zeros_like(params);
    params.backward_decode(&cache, &resid.scale(-1.0), &mut grads)?;
    let recon = 0.5 * resid.data().iter().map(|v| v * v).sum::<f64>();
    let mut prior_term = 0.0;
    if kind == ModelKind::Pc {
        if let Prior::Gaussian(g) = &params.prior {
            let k = g.mu.len();
            let slot = grads.get_mut("mu0").expect("mu0 slot");
            for (i, &c) in code.data().iter().enumerate() {
                let off = c - g.mu.data()[i % k];
                slot.data_mut()[i % k] -= off;
                prior_term += 0.5 * off * off;
            }
        }
    } else {
        prior_term = opts.lca_lambda * code.data().iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok((
        grads,
        StepLoss {
            recon,
            log_norm: 0.0,
            kl: prior_term,
        },
    ))
}

/// Rows per independently processed chunk; fixed so results do not depend on
/// the thread count.
pub const CHUNK_ROWS: usize = 50;

impl Sampler {
    /// The sampler restricted to rows `start..end` of a batch.
    pub fn rows(&self, start: usize, end: usize) -> Sampler {
        match self {
            Sampler::Keyed {
                seed,
                ids,
                temperature,
            } => Sampler::Keyed {
                seed: *seed,
                ids: if ids.is_empty() {
                    (start as u64..end as u64).collect()
                } else {
                    ids[start..end].to_vec()
                },
                temperature: *temperature,
            },
            Sampler::Mean => Sampler::Mean,
            Sampler::Given(t) => {
                let idx: Vec<usize> = (start..end).collect();
                Sampler::Given(t.as_batch().select_rows(&idx))
            }
        }
    }
}

/// Batch gradient of the training loss and the batch-mean loss. For
/// variational models this is full BPTT through `opts.steps` steps.
pub fn bptt_grad(
    x: &Tensor,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &BpttOptions,
) -> Result<(Gradients, BatchLoss)> {
    let xb = x.as_batch();
    let rows = xb.rows();
    if rows == 0 {
        return Err(FondError::InvalidArgument("empty batch".into()));
    }
    let ranges: Vec<(usize, usize)> = (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|s| (s, (s + CHUNK_ROWS).min(rows)))
        .collect();
    let parts: Vec<Result<(Gradients, BatchLoss)>> = ranges
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            let xc = xb.select_rows(&idx);
            let sub = BpttOptions {
                sampler: opts.sampler.rows(s, e),
                ..opts.clone()
            };
            if kind.is_variational() {
                let tape = unroll(&xc, params, kind, &sub)?;
                let g = backward(&tape, params)?;
                let mut l = BatchLoss::default();
                for s in tape.step_losses() {
                    l.recon += s.recon;
                    l.kl += s.kl;
                }
                l.loss = tape.total();
                Ok((g, l))
            } else {
                let (g, s) = energy_grad(&xc, params, kind, &sub)?;
                Ok((
                    g,
                    BatchLoss {
                        loss: s.recon + s.kl,
                        recon: s.recon,
                        kl: s.kl,
                    },
                ))
            }
        })
        .collect();
    let mut total = Gradients::zeros_like(params);
    let mut loss = BatchLoss::default();
    for p in parts {
        let (g, l) = p?;
        total.add(&g)?;
        loss.loss += l.loss;
        loss.recon += l.recon;
        loss.kl += l.kl;
    }
    let inv = 1.0 / rows as f64;
    total.scale(inv);
    loss.loss *= inv;
    loss.recon *= inv;
    loss.kl *= inv;
    if !loss.loss.is_finite() || !total.is_finite() {
        return Err(FondError::NonFinite(format!(
            "batch loss {} (recon {}, kl {})",
            loss.loss, loss.recon, loss.kl
        )));
    }
    Ok((total, loss))
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub t_train: usize,
    pub beta: f64,
    pub kl_target: KlTarget,
    /// Fraction of training over which the KL weight ramps from 0 to 1.
    pub kl_warm_frac: f64,
    /// Rate-noise temperature at the start of training; 0 disables the hook.
    pub temp_start: f64,
    pub temp_stop: f64,
    pub lca_lambda: f64,
    pub lca_tau: f64,
    /// Mean batch loss above which training is declared diverged.
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 200,
            lr: 0.002,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            t_train: 16,
            beta: 24.0,
            kl_target: KlTarget::Rolling,
            kl_warm_frac: 0.1,
            temp_start: 0.0,
            temp_stop: 0.0,
            lca_lambda: 0.5,
            lca_tau: 100.0,
            max_loss: 1e6,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
    pub beta_eff: f64,
    pub wallclock_s: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last good ones if training diverged.
    pub params: GenerativeParams,
    pub log: Vec<EpochLog>,
    pub diverged: Option<FondError>,
}

/// Rescales every dictionary column to unit norm.
pub fn normalize_columns(params: &mut GenerativeParams) {
    if let crate::model::Decoder::Linear { phi } | crate::model::Decoder::LinearRelu { phi } =
        &mut params.decoder
    {
        let (m, k) = (phi.rows(), phi.cols());
        for j in 0..k {
            let n = (0..m).map(|i| phi.get(i, j).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                for i in 0..m {
                    let v = phi.get(i, j) / n;
                    phi.set(i, j, v);
                }
            }
        }
    }
}

/// Trains `params` on the rows of `data` with shuffled minibatches, Adamax,
/// a cosine learning rate and a linear KL warm-up. `on_epoch` is called after
/// every epoch (e.g. to write a checkpoint).
pub fn train(
    kind: ModelKind,
    cfg: &TrainConfig,
    data: &Tensor,
    init: GenerativeParams,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog, &GenerativeParams) -> Result<()>,
) -> Result<TrainOutcome> {
    let n = data.rows();
    if n == 0 || data.cols() != init.input_dim() {
        return Err(FondError::InvalidArgument(format!(
            "dataset {:?} for a model with M = {}",
            data.shape(),
            init.input_dim()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.t_train == 0 || !(cfg.beta >= 0.0) {
        return Err(FondError::InvalidArgument(
            "epochs, batch size and T_train must be ≥ 1 and β ≥ 0".into(),
        ));
    }
    let mut params = init;
    let mut opt = {
        let named = params.named_tensors();
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        Adamax::new(&refs, cfg.beta1, cfg.beta2)
    };
    let batches = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let clock = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = RngStream::for_step(seed, epoch as u64, 0, Purpose::Shuffle);
        order.shuffle(&mut rng);
        let epoch_seed = child_seed(seed, epoch as u64);
        let (mut sum_loss, mut sum_recon, mut sum_kl) = (0.0, 0.0, 0.0);
        let (mut lr, mut beta_eff) = (cfg.lr, cfg.beta);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let progress = epoch as f64 + bi as f64 / batches as f64;
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)?;
            beta_eff = cfg.beta * kl_anneal(progress, cfg.epochs as f64, cfg.kl_warm_frac);
            let temperature = if cfg.temp_start > 0.0 {
                temp_anneal(progress, cfg.epochs as f64, cfg.temp_start, cfg.temp_stop)
            } else {
                0.0
            };
            let x = data.select_rows(chunk);
            let opts = BpttOptions {
                steps: cfg.t_train,
                beta: beta_eff,
                mode: Mode::Online,
                kl_target: cfg.kl_target,
                sampler: Sampler::Keyed {
                    seed: epoch_seed,
                    ids: chunk.iter().map(|&i| i as u64).collect(),
                    temperature,
                },
                lca_lambda: cfg.lca_lambda,
                lca_tau: cfg.lca_tau,
            };
            let outcome = bptt_grad(&x, &params, kind, &opts).and_then(|(g, l)| {
                if l.loss > cfg.max_loss {
                    Err(FondError::Diverged {
                        epoch,
                        step,
                        reason: format!("mean loss {} exceeds {}", l.loss, cfg.max_loss),
                    })
                } else {
                    Ok((g, l))
                }
            });
            let (grads, loss) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    let reason = match e {
                        FondError::Diverged { .. } => e,
                        other => FondError::Diverged {
                            epoch,
                            step,
                            reason: other.to_string(),
                        },
                    };
                    return Ok(TrainOutcome {
                        params,
                        log,
                        diverged: Some(reason),
                    });
                }
            };
            let backup = params.clone();
            opt.step(params.tensors_mut(), &grads.tensors, lr)?;
            if kind == ModelKind::Lca {
                normalize_columns(&mut params);
            }
            if params.validate().is_err() {
                return Ok(TrainOutcome {
                    params: backup,
                    log,
                    diverged: Some(FondError::Diverged {
                        epoch,
                        step,
                        reason: "non-finite parameters after update".into(),
                    }),
                });
            }
            sum_loss += loss.loss;
            sum_recon += loss.recon;
            sum_kl += loss.kl;
            step += 1;
        }
        let row = EpochLog {
            epoch,
            step,
            loss: sum_loss / batches as f64,
            recon: sum_recon / batches as f64,
            kl: sum_kl / batches as f64,
            lr,
            beta_eff,
            wallclock_s: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&row, &params)?;
        log.push(row);
    }
    Ok(TrainOutcome {
        params,
        log,
        diverged: None,
    })
}
