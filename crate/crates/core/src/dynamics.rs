//! Iterative inference engines.
//!
//! * iP-VAE: membrane potentials `u` follow `u̇ = J(z)ᵀ[(x − f(z))/σ²]` with
//!   `z ~ Pois(e^u)`; in static mode a leak `−β(u − u₀)` pulls towards the prior.
//! * iG-VAE / iG-relu-VAE: the Gaussian analogue in `(µ, ξ = log σ)`
//!   coordinates, with a Heaviside mask on the feedback for relu-decoded latents.
//! * Linear predictive coding: gradient descent on the Gaussian free energy.
//! * LCA: leaky integration with soft-thresholded outputs.
//!
//! States are batched, one sample per row. Every stochastic draw comes from a
//! stream keyed by `(seed, sample id, step)`, so a row's trajectory does not
//! depend on what else is in the batch.

use crate::distributions::{gaussian_kl_scalar, poisson_draw, poisson_kl_scalar, RATE_GUARD};
use crate::error::{FondError, Result};
use crate::model::{DecodeCache, DecoderKind, GenerativeParams, LatentFamily, Prior};
use crate::numerics::{gemm, Purpose, RngStream, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ipvae,
    Igvae,
    Igrelu,
    Pc,
    Lca,
}

impl ModelKind {
    pub fn family(self) -> LatentFamily {
        match self {
            ModelKind::Ipvae => LatentFamily::Poisson,
            _ => LatentFamily::Gaussian,
        }
    }

    pub fn default_decoder(self) -> DecoderKind {
        match self {
            ModelKind::Igrelu => DecoderKind::LinearRelu,
            _ => DecoderKind::Linear,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ipvae => "ipvae",
            ModelKind::Igvae => "igvae",
            ModelKind::Igrelu => "igrelu",
            ModelKind::Pc => "pc",
            ModelKind::Lca => "lca",
        }
    }

    /// Whether the model has a variational posterior and stochastic latents.
    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::Ipvae | ModelKind::Igvae | ModelKind::Igrelu)
    }

    fn check(self, params: &GenerativeParams) -> Result<()> {
        let dec = params.decoder.kind();
        let ok = match self {
            ModelKind::Ipvae => params.family() == LatentFamily::Poisson && dec != DecoderKind::LinearRelu,
            ModelKind::Igvae => params.family() == LatentFamily::Gaussian && dec != DecoderKind::LinearRelu,
            ModelKind::Igrelu => params.family() == LatentFamily::Gaussian && dec == DecoderKind::LinearRelu,
            ModelKind::Pc | ModelKind::Lca => dec == DecoderKind::Linear,
        };
        if ok {
            Ok(())
        } else {
            Err(FondError::InvalidArgument(format!(
                "{} cannot run with a {:?} decoder and {:?} prior",
                self.name(),
                dec,
                params.family()
            )))
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = FondError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipvae" => Ok(ModelKind::Ipvae),
            "igvae" => Ok(ModelKind::Igvae),
            "igrelu" => Ok(ModelKind::Igrelu),
            "pc" => Ok(ModelKind::Pc),
            "lca" => Ok(ModelKind::Lca),
            other => Err(FondError::InvalidArgument(format!("unknown model kind {other}"))),
        }
    }
}

/// Online inference rolls the prior forward each step, so the leak vanishes;
/// static inference keeps the learned prior and a `β`-weighted pull towards it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Online,
    Static(f64),
}

impl Mode {
    fn leak(self) -> f64 {
        match self {
            Mode::Online => 0.0,
            Mode::Static(b) => b,
        }
    }
}

/// Which prior the per-step KL is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTarget {
    /// `KL(q_{t+1} ‖ q_t)`
    #[default]
    Rolling,
    /// `KL(q_{t+1} ‖ p₀)`
    FixedPrior,
}

/// Where latent draws come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    /// Row `i` draws from the stream keyed by `(seed, ids[i], t)`. An empty
    /// id list means ids `0..B`. A positive temperature multiplies rates by
    /// `exp(temperature · logistic noise)` before drawing.
    Keyed {
        seed: u64,
        ids: Vec<u64>,
        temperature: f64,
    },
    /// No noise: Poisson latents equal their rates, Gaussian noise is zero.
    Mean,
    /// Poisson counts, or Gaussian `ε`, supplied by the caller.
    Given(Tensor),
}

impl Sampler {
    pub fn keyed(seed: u64) -> Self {
        Sampler::Keyed {
            seed,
            ids: Vec::new(),
            temperature: 0.0,
        }
    }

    pub fn keyed_rows(seed: u64, ids: Vec<u64>) -> Self {
        Sampler::Keyed {
            seed,
            ids,
            temperature: 0.0,
        }
    }

    fn row_id(ids: &[u64], i: usize) -> u64 {
        if ids.is_empty() {
            i as u64
        } else {
            ids[i]
        }
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        match self {
            Sampler::Keyed { ids, .. } if !ids.is_empty() && ids.len() != rows => Err(
                FondError::Shape(format!("sampler has {} ids for {rows} rows", ids.len())),
            ),
            _ => Ok(()),
        }
    }

    pub(crate) fn poisson(&self, r: &Tensor, t: usize) -> Result<Tensor> {
        self.check_rows(r.rows())?;
        match self {
            Sampler::Mean => Ok(r.clone()),
            Sampler::Given(z) => {
                if z.len() != r.len() {
                    return Err(FondError::Shape("given counts".into()));
                }
                Ok(z.as_batch().reshape(r.shape())?)
            }
            Sampler::Keyed {
                seed,
                ids,
                temperature,
            } => {
                let k = r.cols();
                let mut z = Tensor::zeros(r.shape());
                for (i, (zrow, rrow)) in z
                    .data_mut()
                    .chunks_exact_mut(k)
                    .zip(r.data().chunks_exact(k))
                    .enumerate()
                {
                    let id = Self::row_id(ids, i);
                    let mut rng = RngStream::for_step(*seed, id, t as u64, Purpose::PoissonSample);
                    let mut noise = (*temperature > 0.0)
                        .then(|| RngStream::for_step(*seed, id, t as u64, Purpose::RateNoise));
                    for (zv, &rv) in zrow.iter_mut().zip(rrow) {
                        let rate = match noise.as_mut() {
                            Some(n) => {
                                let u = n.open01();
                                rv * (temperature * (u / (1.0 - u)).ln()).exp()
                            }
                            None => rv,
                        };
                        *zv = poisson_draw(rate, &mut rng)?;
                    }
                }
                Ok(z)
            }
        }
    }

    pub(crate) fn gaussian(&self, shape: &[usize], t: usize) -> Result<Tensor> {
        let rows = if shape.len() == 2 { shape[0] } else { 1 };
        self.check_rows(rows)?;
        match self {
            Sampler::Mean => Ok(Tensor::zeros(shape)),
            Sampler::Given(eps) => {
                if eps.len() != shape.iter().product::<usize>() {
                    return Err(FondError::Shape("given noise".into()));
                }
                eps.as_batch().reshape(shape)
            }
            Sampler::Keyed { seed, ids, .. } => {
                let mut eps = Tensor::zeros(shape);
                let k = *shape.last().unwrap_or(&0);
                for (i, row) in eps.data_mut().chunks_exact_mut(k.max(1)).enumerate() {
                    let id = Self::row_id(ids, i);
                    let mut rng = RngStream::for_step(*seed, id, t as u64, Purpose::GaussianSample);
                    for v in row.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                }
                Ok(eps)
            }
        }
    }
}

/// Posterior (or deterministic) state variables.
#[derive(Debug, Clone, PartialEq)]
pub enum Latent {
    Poisson { u: Tensor },
    Gaussian { mu: Tensor, xi: Tensor },
    Pc { mu: Tensor },
    Lca { u: Tensor },
}

/// Batched inference state. `z`, `map` and `eps` describe the code used at
/// the step that produced this state (so after step `t` they hold `z_t`,
/// `r_t = e^{u_t}` and `ε_t`, while the latent holds `u_{t+1}`).
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    pub latent: Latent,
    /// Sampled code (decoder input before any rectification).
    pub z: Tensor,
    /// Mean code: rates for Poisson latents, means otherwise.
    pub map: Tensor,
    pub eps: Option<Tensor>,
    /// Number of steps taken.
    pub t: usize,
}

impl InferenceState {
    /// Initial state for a batch of `rows` samples: the learned prior for
    /// variational models, `µ₀` for PC and zero potentials for LCA.
    pub fn initial(params: &GenerativeParams, kind: ModelKind, rows: usize) -> Result<Self> {
        kind.check(params)?;
        let k = params.latent_dim();
        let latent = match (&params.prior, kind) {
            (_, ModelKind::Lca) => Latent::Lca {
                u: Tensor::zeros(&[rows, k]),
            },
            (Prior::Gaussian(g), ModelKind::Pc) => Latent::Pc {
                mu: Tensor::broadcast_rows(&g.mu, rows),
            },
            (Prior::Poisson(p), _) => Latent::Poisson {
                u: Tensor::broadcast_rows(&p.u, rows),
            },
            (Prior::Gaussian(g), _) => Latent::Gaussian {
                mu: Tensor::broadcast_rows(&g.mu, rows),
                xi: Tensor::broadcast_rows(&g.xi, rows),
            },
        };
        Ok(InferenceState {
            latent,
            z: Tensor::zeros(&[rows, k]),
            map: Tensor::zeros(&[rows, k]),
            eps: None,
            t: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }

    /// Current firing rates `e^u` (Poisson states only).
    pub fn rates(&self) -> Option<Tensor> {
        match &self.latent {
            Latent::Poisson { u } => Some(u.map(f64::exp)),
            _ => None,
        }
    }
}

fn prior_row(params: &GenerativeParams) -> (Tensor, Option<Tensor>) {
    match &params.prior {
        Prior::Poisson(p) => (p.u.clone(), None),
        Prior::Gaussian(g) => (g.mu.clone(), Some(g.xi.clone())),
    }
}

fn check_x(x: &Tensor, params: &GenerativeParams, rows: usize) -> Result<Tensor> {
    let xb = x.as_batch();
    if xb.cols() != params.input_dim() || xb.rows() != rows {
        return Err(FondError::Shape(format!(
            "input {:?} for {rows} rows of dimension {}",
            x.shape(),
            params.input_dim()
        )));
    }
    Ok(xb)
}

fn check_rates(r: &Tensor) -> Result<()> {
    for &v in r.data() {
        if !(v <= RATE_GUARD) {
            return Err(FondError::RateOverflow {
                rate: v,
                guard: RATE_GUARD,
            });
        }
    }
    Ok(())
}

/// Everything one Poisson step computes; reused by the training tape.
pub(crate) struct PoissonCore {
    pub r: Tensor,
    pub z: Tensor,
    pub cache: DecodeCache,
    pub e: Tensor,
    /// `u̇`: feedback minus the static-mode leak.
    pub dir: Tensor,
    pub u_next: Tensor,
}

pub(crate) fn poisson_core(
    u: &Tensor,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
    sampler: &Sampler,
    t: usize,
) -> Result<PoissonCore> {
    let r = u.map(f64::exp);
    check_rates(&r)?;
    let z = sampler.poisson(&r, t)?;
    poisson_core_given(u, r, z, x, params, mode)
}

pub(crate) fn poisson_core_given(
    u: &Tensor,
    r: Tensor,
    z: Tensor,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
) -> Result<PoissonCore> {
    let cache = params.decode_batch(&z)?;
    let e = params.weighted_residual(x, &cache.xhat)?;
    let mut dir = params.feedback_batch(&cache, &e)?;
    let beta = mode.leak();
    if beta != 0.0 {
        let (u0, _) = prior_row(params);
        let k = u0.len();
        for (drow, urow) in dir.data_mut().chunks_exact_mut(k).zip(u.data().chunks_exact(k)) {
            for ((d, &uv), &u0v) in drow.iter_mut().zip(urow).zip(u0.data()) {
                *d -= beta * (uv - u0v);
            }
        }
    }
    let mut u_next = u.clone();
    u_next.axpy(params.dt(), &dir)?;
    Ok(PoissonCore {
        r,
        z,
        cache,
        e,
        dir,
        u_next,
    })
}

/// One iP-VAE step: draw `z_t ~ Pois(e^{u_t})` and move `u` along the
/// feedback (minus the leak in static mode).
pub fn ipvae_step(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
    sampler: &Sampler,
) -> Result<InferenceState> {
    let Latent::Poisson { u } = &state.latent else {
        return Err(FondError::InvalidArgument("ipvae_step needs a Poisson state".into()));
    };
    let x = check_x(x, params, u.rows())?;
    let c = poisson_core(u, &x, params, mode, sampler, state.t)?;
    Ok(InferenceState {
        latent: Latent::Poisson { u: c.u_next },
        z: c.z,
        map: c.r,
        eps: None,
        t: state.t + 1,
    })
}

/// Multiplicative form of the iP-VAE update for a linear decoder:
/// `r′_i = r_i · exp(dt (Φᵀx/σ²)_i) / Π_j exp(dt W_ij z_j)` with
/// `W = Φᵀ diag(σ⁻²) Φ`. Only valid in online mode.
pub fn rate_step(r: &Tensor, z: &Tensor, x: &Tensor, params: &GenerativeParams) -> Result<Tensor> {
    let Some(phi) = params.decoder.dictionary().filter(|_| params.decoder.kind() == DecoderKind::Linear)
    else {
        return Err(FondError::InvalidArgument("rate_step needs a linear decoder".into()));
    };
    let rb = r.as_batch();
    let zb = z.as_batch();
    let xb = check_x(x, params, rb.rows())?;
    if zb.len() != rb.len() || rb.cols() != params.latent_dim() {
        return Err(FondError::Shape("rate_step: r and z differ".into()));
    }
    let (m, k) = (phi.rows(), phi.cols());
    let prec = params.precision();
    let dt = params.dt();
    // Weighted dictionary Φ̃ = diag(σ⁻²)Φ, drive Φ̃ᵀx and W = ΦᵀΦ̃.
    let mut phi_w = phi.clone();
    for i in 0..m {
        for v in phi_w.row_mut(i) {
            *v *= prec.data()[i];
        }
    }
    let mut drive = Tensor::zeros(&[rb.rows(), k]);
    gemm(1.0, &xb, false, &phi_w, false, 0.0, &mut drive)?;
    let mut w = Tensor::zeros(&[k, k]);
    gemm(1.0, phi, true, &phi_w, false, 0.0, &mut w)?;
    let excite = drive.map(|a| (dt * a).exp());
    let inhib = w.map(|v| v * dt);
    let mut out = rb.clone();
    for b in 0..rb.rows() {
        let zrow = zb.row(b);
        for i in 0..k {
            let mut denom = 1.0;
            for (j, &zj) in zrow.iter().enumerate() {
                if zj != 0.0 {
                    denom *= (inhib.get(i, j) * zj).exp();
                }
            }
            let v = rb.get(b, i) * excite.get(b, i) / denom;
            out.set(b, i, v);
        }
    }
    Ok(out.reshape(r.shape())?)
}

pub(crate) struct GaussianCore {
    pub eps: Tensor,
    pub z: Tensor,
    pub cache: DecodeCache,
    pub e: Tensor,
    /// Feedback after the relu mask (if any).
    pub fb: Tensor,
    pub dmu: Tensor,
    pub dxi: Tensor,
    pub mu_next: Tensor,
    pub xi_next: Tensor,
}

pub(crate) fn gaussian_core(
    mu: &Tensor,
    xi: &Tensor,
    eps: Tensor,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
    relu_mask: bool,
) -> Result<GaussianCore> {
    let mut z = mu.clone();
    for ((zv, &s), &e) in z.data_mut().iter_mut().zip(xi.data()).zip(eps.data()) {
        *zv += s.exp() * e;
    }
    let cache = params.decode_batch(&z)?;
    let e = params.weighted_residual(x, &cache.xhat)?;
    let mut fb = params.feedback_batch(&cache, &e)?;
    if relu_mask {
        for (f, &zv) in fb.data_mut().iter_mut().zip(z.data()) {
            if zv <= 0.0 {
                *f = 0.0;
            }
        }
    }
    let beta = mode.leak();
    let (mu0, xi0) = prior_row(params);
    let xi0 = xi0.unwrap_or_else(|| Tensor::zeros(mu0.shape()));
    let k = mu0.len();
    let mut dmu = Tensor::zeros(mu.shape());
    let mut dxi = Tensor::zeros(mu.shape());
    for idx in 0..mu.len() {
        let j = idx % k;
        let (m, s, f, ep) = (mu.data()[idx], xi.data()[idx], fb.data()[idx], eps.data()[idx]);
        let mut a = (2.0 * s).exp() * f;
        let mut b = 0.5 * ep * f;
        if beta != 0.0 {
            let w = (2.0 * (s - xi0.data()[j])).exp();
            a -= beta * w * (m - mu0.data()[j]);
            b -= 0.5 * beta * (w - 1.0);
        }
        dmu.data_mut()[idx] = a;
        dxi.data_mut()[idx] = b;
    }
    let dt = params.dt();
    let mut mu_next = mu.clone();
    mu_next.axpy(dt, &dmu)?;
    let mut xi_next = xi.clone();
    xi_next.axpy(dt, &dxi)?;
    mu_next.ensure_finite("gaussian mean")?;
    xi_next.ensure_finite("gaussian log-scale")?;
    Ok(GaussianCore {
        eps,
        z,
        cache,
        e,
        fb,
        dmu,
        dxi,
        mu_next,
        xi_next,
    })
}

fn gaussian_step(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
    sampler: &Sampler,
    relu: bool,
) -> Result<InferenceState> {
    let Latent::Gaussian { mu, xi } = &state.latent else {
        return Err(FondError::InvalidArgument("gaussian step needs a Gaussian state".into()));
    };
    if relu != (params.decoder.kind() == DecoderKind::LinearRelu) {
        return Err(FondError::InvalidArgument(
            "relu-decoded latents need igrelu_step, and igrelu_step needs a relu decoder".into(),
        ));
    }
    let x = check_x(x, params, mu.rows())?;
    let eps = sampler.gaussian(mu.shape(), state.t)?;
    let c = gaussian_core(mu, xi, eps, &x, params, mode, relu)?;
    Ok(InferenceState {
        latent: Latent::Gaussian {
            mu: c.mu_next,
            xi: c.xi_next,
        },
        z: c.z,
        map: mu.clone(),
        eps: Some(c.eps),
        t: state.t + 1,
    })
}

/// One iG-VAE step:
/// `µ̇ = e^{2ξ}⊙fb − β e^{2(ξ−ξ₀)}⊙(µ−µ₀)`, `ξ̇ = ½ε⊙fb − ½β(e^{2(ξ−ξ₀)} − 1)`,
/// with the `β` terms present only in static mode.
pub fn igvae_step(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
    sampler: &Sampler,
) -> Result<InferenceState> {
    gaussian_step(state, x, params, mode, sampler, false)
}

/// iG-VAE step for relu-decoded latents: the feedback is masked by `Θ(z)`.
pub fn igrelu_step(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    mode: Mode,
    sampler: &Sampler,
) -> Result<InferenceState> {
    gaussian_step(state, x, params, mode, sampler, true)
}

pub(crate) struct PcCore {
    pub cache: DecodeCache,
    pub e: Tensor,
    pub dir: Tensor,
    pub mu_next: Tensor,
}

pub(crate) fn pc_core(mu: &Tensor, x: &Tensor, params: &GenerativeParams) -> Result<PcCore> {
    let cache = params.decode_batch(mu)?;
    let e = params.weighted_residual(x, &cache.xhat)?;
    let mut dir = params.feedback_batch(&cache, &e)?;
    let (mu0, _) = prior_row(params);
    let k = mu0.len();
    for (drow, mrow) in dir.data_mut().chunks_exact_mut(k).zip(mu.data().chunks_exact(k)) {
        for ((d, &m), &m0) in drow.iter_mut().zip(mrow).zip(mu0.data()) {
            *d -= m - m0;
        }
    }
    let mut mu_next = mu.clone();
    mu_next.axpy(params.dt(), &dir)?;
    Ok(PcCore {
        cache,
        e,
        dir,
        mu_next,
    })
}

/// Linear predictive coding: `µ′ = µ + dt·(Φᵀ(x − Φµ)/σ² − (µ − µ₀))`.
pub fn pc_step(mu: &Tensor, x: &Tensor, params: &GenerativeParams) -> Result<Tensor> {
    ModelKind::Pc.check(params)?;
    let mb = mu.as_batch();
    let xb = check_x(x, params, mb.rows())?;
    pc_core(&mb, &xb, params)?.mu_next.reshape(mu.shape())
}

pub fn soft_threshold(u: f64, lambda: f64) -> f64 {
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

pub(crate) struct LcaCore {
    pub a: Tensor,
    pub xhat: Tensor,
    pub dir: Tensor,
    pub u_next: Tensor,
}

pub(crate) fn lca_core(
    u: &Tensor,
    x: &Tensor,
    params: &GenerativeParams,
    lambda: f64,
    tau: f64,
) -> Result<LcaCore> {
    let a = u.map(|v| soft_threshold(v, lambda));
    let cache = params.decode_batch(&a)?;
    let resid = x.sub(&cache.xhat)?;
    let phi = params.decoder.dictionary().expect("linear decoder");
    // Φᵀx − (ΦᵀΦ − I)a − u = Φᵀ(x − Φa) + a − u
    let mut dir = a.sub(u)?;
    gemm(1.0, &resid, false, phi, false, 1.0, &mut dir)?;
    let mut u_next = u.clone();
    u_next.axpy(1.0 / tau, &dir)?;
    Ok(LcaCore {
        a,
        xhat: cache.xhat,
        dir,
        u_next,
    })
}

/// One LCA step; returns the new potentials and the thresholded output of
/// the old ones.
pub fn lca_step(
    u: &Tensor,
    x: &Tensor,
    params: &GenerativeParams,
    lambda: f64,
    tau: f64,
) -> Result<(Tensor, Tensor)> {
    ModelKind::Lca.check(params)?;
    if !(tau > 0.0) || !(lambda >= 0.0) {
        return Err(FondError::InvalidArgument(format!("lca λ={lambda}, τ={tau}")));
    }
    let ub = u.as_batch();
    let xb = check_x(x, params, ub.rows())?;
    let c = lca_core(&ub, &xb, params, lambda, tau)?;
    Ok((c.u_next.reshape(u.shape())?, c.a.reshape(u.shape())?))
}

/// Which reconstructions a run scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    Sampled,
    Map,
    Both,
}

impl Decode {
    pub fn from_flag(map_decode: bool) -> Self {
        if map_decode {
            Decode::Map
        } else {
            Decode::Sampled
        }
    }

    fn sampled(self) -> bool {
        matches!(self, Decode::Sampled | Decode::Both)
    }

    fn map(self) -> bool {
        matches!(self, Decode::Map | Decode::Both)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub steps: usize,
    pub mode: Mode,
    /// Weight of the KL term in the recorded free energy.
    pub beta: f64,
    pub kl_target: KlTarget,
    pub decode: Decode,
    pub lca_lambda: f64,
    pub lca_tau: f64,
    /// Record per-step metrics (otherwise the trace stays empty).
    pub record: bool,
}

impl RunOptions {
    pub fn new(steps: usize, beta: f64) -> Self {
        RunOptions {
            steps,
            mode: Mode::Online,
            beta,
            kl_target: KlTarget::Rolling,
            decode: Decode::Sampled,
            lca_lambda: 0.5,
            lca_tau: 100.0,
            record: true,
        }
    }
}

/// Batch-averaged metrics for one inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub free_energy: f64,
    pub recon_loss: f64,
    pub kl: f64,
    /// Norm of the state velocity (`‖u̇‖` or `‖µ̇‖`).
    pub grad_norm: f64,
    /// R² of the reconstruction from the sampled code.
    pub r2: Option<f64>,
    /// R² of the reconstruction from the mean code.
    pub r2_map: Option<f64>,
    /// Fraction of exact zeros in the decoded code.
    pub sparsity: f64,
}

impl StepRecord {
    /// The MAP R² if it was computed, else the sampled one.
    pub fn r2_primary(&self) -> f64 {
        self.r2_map.or(self.r2).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Default)]
pub struct InferenceTrace {
    pub records: Vec<StepRecord>,
}

impl InferenceTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn series(&self, f: impl Fn(&StepRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }
}

/// Per-row sums `(SS_res, SS_tot)` with each row centred on its own mean;
/// rows with constant input are skipped.
pub(crate) fn r2_sums(x: &Tensor, xhat: &Tensor) -> (f64, f64) {
    let (mut res, mut tot) = (0.0, 0.0);
    for b in 0..x.rows() {
        let (xr, hr) = (x.row(b), xhat.row(b));
        let mean = xr.iter().sum::<f64>() / xr.len().max(1) as f64;
        let t: f64 = xr.iter().map(|v| (v - mean).powi(2)).sum();
        if t > 0.0 {
            tot += t;
            res += xr.iter().zip(hr).map(|(a, h)| (a - h).powi(2)).sum::<f64>();
        }
    }
    (res, tot)
}

/// Batch R²: `1 − ΣSS_res / ΣSS_tot` over rows, i.e. the per-row R²
/// averaged with weights proportional to each row's variance.
pub fn pooled_r2(x: &Tensor, xhat: &Tensor) -> f64 {
    let (res, tot) = r2_sums(x, xhat);
    if tot > 0.0 {
        1.0 - res / tot
    } else {
        0.0
    }
}

fn mean_row_norm(t: &Tensor) -> f64 {
    let rows = t.rows().max(1);
    let c = t.cols().max(1);
    t.data()
        .chunks_exact(c)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows as f64
}

fn zero_fraction(t: &Tensor) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.len() as f64
}

fn weighted_sq(params: &GenerativeParams, e: &Tensor) -> f64 {
    // e = r/σ², so r²/σ² = e²σ²
    let var = params.log_sigma_x.map(|s| (2.0 * s).exp());
    let m = var.len();
    e.data()
        .chunks_exact(m)
        .map(|row| row.iter().zip(var.data()).map(|(ev, v)| ev * ev * v).sum::<f64>())
        .sum::<f64>()
}

/// Runs `opts.steps` steps of the model's dynamics on a batch `x: [B×M]`
/// (or a single sample `[M]`) from the initial state.
pub fn run_inference(
    x: &Tensor,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &RunOptions,
    sampler: &Sampler,
) -> Result<(InferenceState, InferenceTrace)> {
    run_inference_with(x, params, kind, opts, sampler, &mut |_, _| Ok(()))
}

/// As [`run_inference`], calling `observe(x, state)` after every step.
pub fn run_inference_with(
    x: &Tensor,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &RunOptions,
    sampler: &Sampler,
    observe: &mut dyn FnMut(&Tensor, &InferenceState) -> Result<()>,
) -> Result<(InferenceState, InferenceTrace)> {
    let xb = x.as_batch();
    run_stimulus(xb.rows(), &mut |_| Ok(xb.clone()), params, kind, opts, sampler, observe)
}

/// Inference on a time-varying input: `frame(t)` supplies the `[B×M]` input
/// for step `t`. Used for drifting-grating experiments; a constant frame
/// reproduces [`run_inference_with`].
pub fn run_stimulus(
    rows: usize,
    frame: &mut dyn FnMut(usize) -> Result<Tensor>,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &RunOptions,
    sampler: &Sampler,
    observe: &mut dyn FnMut(&Tensor, &InferenceState) -> Result<()>,
) -> Result<(InferenceState, InferenceTrace)> {
    if opts.steps == 0 {
        return Err(FondError::InvalidArgument("inference needs T ≥ 1".into()));
    }
    let mut state = InferenceState::initial(params, kind, rows)?;
    let mut trace = InferenceTrace::default();
    for t in 0..opts.steps {
        let xb = check_x(&frame(t)?, params, rows)?;
        let (next, rec) = advance(&state, &xb, params, kind, opts, sampler)?;
        state = next;
        observe(&xb, &state)?;
        if let Some(r) = rec {
            trace.records.push(r);
        }
    }
    Ok((state, trace))
}

/// Steps a state once with the model's dynamics.
pub fn step(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &RunOptions,
    sampler: &Sampler,
) -> Result<InferenceState> {
    let xb = check_x(x, params, state.rows())?;
    let quiet = RunOptions {
        record: false,
        ..opts.clone()
    };
    Ok(advance(state, &xb, params, kind, &quiet, sampler)?.0)
}

fn advance(
    state: &InferenceState,
    x: &Tensor,
    params: &GenerativeParams,
    kind: ModelKind,
    opts: &RunOptions,
    sampler: &Sampler,
) -> Result<(InferenceState, Option<StepRecord>)> {
    let rows = x.rows().max(1) as f64;
    let t = state.t;
    let (next, xhat, e, velocity, kl, extra) = match (&state.latent, kind) {
        (Latent::Poisson { u }, ModelKind::Ipvae) => {
            let c = poisson_core(u, x, params, opts.mode, sampler, t)?;
            let kl = if opts.record {
                let u_ref = match opts.kl_target {
                    KlTarget::Rolling => u.clone(),
                    KlTarget::FixedPrior => Tensor::broadcast_rows(&prior_row(params).0, u.rows()),
                };
                c.u_next
                    .data()
                    .iter()
                    .zip(u_ref.data())
                    .map(|(&a, &b)| poisson_kl_scalar(a, b))
                    .sum::<f64>()
            } else {
                0.0
            };
            let next = InferenceState {
                latent: Latent::Poisson { u: c.u_next },
                z: c.z,
                map: c.r,
                eps: None,
                t: t + 1,
            };
            (next, c.cache.xhat, Some(c.e), c.dir, kl, 0.0)
        }
        (Latent::Gaussian { mu, xi }, ModelKind::Igvae | ModelKind::Igrelu) => {
            let relu = kind == ModelKind::Igrelu;
            let eps = sampler.gaussian(mu.shape(), t)?;
            let c = gaussian_core(mu, xi, eps, x, params, opts.mode, relu)?;
            let kl = if opts.record {
                let (m_ref, s_ref) = match opts.kl_target {
                    KlTarget::Rolling => (mu.clone(), xi.clone()),
                    KlTarget::FixedPrior => {
                        let (m0, s0) = prior_row(params);
                        (
                            Tensor::broadcast_rows(&m0, mu.rows()),
                            Tensor::broadcast_rows(&s0.expect("gaussian prior"), mu.rows()),
                        )
                    }
                };
                (0..mu.len())
                    .map(|i| {
                        gaussian_kl_scalar(
                            c.mu_next.data()[i],
                            c.xi_next.data()[i],
                            m_ref.data()[i],
                            s_ref.data()[i],
                        )
                    })
                    .sum::<f64>()
            } else {
                0.0
            };
            let next = InferenceState {
                latent: Latent::Gaussian {
                    mu: c.mu_next,
                    xi: c.xi_next,
                },
                z: c.z,
                map: mu.clone(),
                eps: Some(c.eps),
                t: t + 1,
            };
            (next, c.cache.xhat, Some(c.e), c.dmu, kl, 0.0)
        }
        (Latent::Pc { mu }, ModelKind::Pc) => {
            let c = pc_core(mu, x, params)?;
            let (mu0, _) = prior_row(params);
            let k = mu0.len();
            let prior_energy = mu
                .data()
                .iter()
                .enumerate()
                .map(|(i, &m)| 0.5 * (m - mu0.data()[i % k]).powi(2))
                .sum::<f64>();
            let next = InferenceState {
                latent: Latent::Pc { mu: c.mu_next },
                z: mu.clone(),
                map: mu.clone(),
                eps: None,
                t: t + 1,
            };
            (next, c.cache.xhat, Some(c.e), c.dir, prior_energy, 0.0)
        }
        (Latent::Lca { u }, ModelKind::Lca) => {
            let c = lca_core(u, x, params, opts.lca_lambda, opts.lca_tau)?;
            let l1 = opts.lca_lambda * c.a.data().iter().map(|v| v.abs()).sum::<f64>();
            let recon = 0.5
                * x.data()
                    .iter()
                    .zip(c.xhat.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
            let next = InferenceState {
                latent: Latent::Lca { u: c.u_next },
                z: c.a.clone(),
                map: c.a,
                eps: None,
                t: t + 1,
            };
            (next, c.xhat, None, c.dir, l1, recon)
        }
        _ => {
            return Err(FondError::InvalidArgument(format!(
                "state does not match model kind {kind}"
            )))
        }
    };
    if !opts.record {
        return Ok((next, None));
    }
    let recon = match &e {
        Some(e) => 0.5 * weighted_sq(params, e),
        None => extra,
    };
    let kl_weight = if kind.is_variational() { opts.beta } else { 1.0 };
    let code_in = match kind {
        ModelKind::Igrelu => next.z.map(|v| if v > 0.0 { v } else { 0.0 }),
        _ => next.z.clone(),
    };
    let r2 = opts.decode.sampled().then(|| pooled_r2(x, &xhat));
    let r2_map = if opts.decode.map() {
        let xm = if kind.is_variational() {
            params.decode_batch(&next.map)?.xhat
        } else {
            xhat.clone()
        };
        Some(pooled_r2(x, &xm))
    } else {
        None
    };
    let rec = StepRecord {
        t,
        free_energy: (recon + kl_weight * kl) / rows,
        recon_loss: recon / rows,
        kl: kl / rows,
        grad_norm: mean_row_norm(&velocity),
        r2,
        r2_map,
        sparsity: zero_fraction(&code_in),
    };
    Ok((next, Some(rec)))
}
