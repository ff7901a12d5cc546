//! Poisson and factorised-Gaussian posteriors: sampling, closed-form KL
//! divergences and Fisher information metrics.
//!
//! Poisson latents are parameterised by membrane potentials `u` (log-rates,
//! the canonical parameter); Gaussian latents by mean `mu` and log standard
//! deviation `xi`. In these coordinates the Fisher metrics are diagonal:
//! `e^u` for the Poisson family and `diag(e^{-2xi}, 2)` for the Gaussian one.
//!
//! Sampling uses multiplicative inversion for rates below 30 and Hörmann's
//! transformed rejection with squeeze (PTRS) above, so draws are exact at any
//! rate and take bounded expected time.

use crate::error::{FondError, Result};
use crate::numerics::{RngStream, Tensor};
use rand_distr::{Distribution, StandardNormal};

/// Largest firing rate a sampler will accept (2^20).
pub const RATE_GUARD: f64 = 1_048_576.0;

const INVERSION_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonParams {
    pub u: Tensor,
}

impl PoissonParams {
    pub fn new(u: Tensor) -> Self {
        PoissonParams { u }
    }

    pub fn rates(&self) -> Tensor {
        self.u.map(f64::exp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub xi: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, xi: Tensor) -> Result<Self> {
        if mu.len() != xi.len() {
            return Err(FondError::Shape(format!(
                "gaussian params: mu {:?}, xi {:?}",
                mu.shape(),
                xi.shape()
            )));
        }
        Ok(GaussianParams { mu, xi })
    }

    pub fn sigma(&self) -> Tensor {
        self.xi.map(f64::exp)
    }
}

/// A KL divergence reduced to a scalar, alongside its elementwise terms.
#[derive(Debug, Clone)]
pub struct Kl {
    pub total: f64,
    pub per_dim: Tensor,
}

/// One Poisson draw with the given rate.
pub fn poisson_draw(rate: f64, rng: &mut RngStream) -> Result<f64> {
    if !(rate >= 0.0) || !rate.is_finite() || rate > RATE_GUARD {
        return Err(FondError::RateOverflow {
            rate,
            guard: RATE_GUARD,
        });
    }
    if rate == 0.0 {
        return Ok(0.0);
    }
    if rate < INVERSION_LIMIT {
        Ok(poisson_inversion(rate, rng))
    } else {
        Ok(poisson_ptrs(rate, rng))
    }
}

fn poisson_inversion(rate: f64, rng: &mut RngStream) -> f64 {
    let limit = (-rate).exp();
    let mut k = 0.0;
    let mut prod = rng.open01();
    while prod > limit {
        k += 1.0;
        prod *= rng.open01();
    }
    k
}

fn poisson_ptrs(rate: f64, rng: &mut RngStream) -> f64 {
    let slam = rate.sqrt();
    let loglam = rate.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.open01() - 0.5;
        let v = rng.open01();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + rate + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -rate + k * loglam - libm::lgamma(k + 1.0);
        if lhs <= rhs {
            return k;
        }
    }
}

/// Independent Poisson counts with rates `exp(u)`, stored as reals.
pub fn poisson_sample(u: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
    let mut out = Tensor::zeros(u.shape());
    for (o, &ui) in out.data_mut().iter_mut().zip(u.data()) {
        *o = poisson_draw(ui.exp(), rng)?;
    }
    Ok(out)
}

/// `KL(Pois(e^u) ‖ Pois(e^u0)) = Σ e^{u0} + e^u (u − u0 − 1)`.
pub fn poisson_kl(u_post: &Tensor, u_prior: &Tensor) -> Result<Kl> {
    let per_dim = u_post.zip_map(u_prior, poisson_kl_scalar).map_err(|_| {
        FondError::Shape(format!(
            "poisson_kl: {:?} vs {:?}",
            u_post.shape(),
            u_prior.shape()
        ))
    })?;
    Ok(Kl {
        total: per_dim.sum(),
        per_dim,
    })
}

pub(crate) fn poisson_kl_scalar(u: f64, u0: f64) -> f64 {
    let r = u.exp();
    let r0 = u0.exp();
    if r == 0.0 {
        r0
    } else {
        r0 + r * (u - u0 - 1.0)
    }
}

/// Fisher information of the Poisson family in log-rate coordinates: `e^u`.
pub fn poisson_fisher(u: &Tensor) -> Tensor {
    u.map(f64::exp)
}

/// Reparameterised Gaussian draw; returns `(z, eps)` with
/// `z = mu + exp(xi) ⊙ eps`.
pub fn gaussian_sample(p: &GaussianParams, rng: &mut RngStream) -> (Tensor, Tensor) {
    let mut eps = Tensor::zeros(p.mu.shape());
    for e in eps.data_mut() {
        *e = StandardNormal.sample(rng);
    }
    let z = gaussian_reparam(p, &eps);
    (z, eps)
}

pub(crate) fn gaussian_reparam(p: &GaussianParams, eps: &Tensor) -> Tensor {
    let mut z = p.mu.clone();
    for ((zi, &xi), &e) in z.data_mut().iter_mut().zip(p.xi.data()).zip(eps.data()) {
        let s = xi.exp();
        if s != 0.0 {
            *zi += s * e;
        }
    }
    z
}

/// `KL(N(mu, e^{2xi}) ‖ N(mu0, e^{2xi0}))` summed over dimensions.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<Kl> {
    if q.mu.len() != p.mu.len() || q.xi.len() != p.xi.len() {
        return Err(FondError::Shape(format!(
            "gaussian_kl: {:?} vs {:?}",
            q.mu.shape(),
            p.mu.shape()
        )));
    }
    let mut per_dim = Tensor::zeros(q.mu.shape());
    for (i, o) in per_dim.data_mut().iter_mut().enumerate() {
        *o = gaussian_kl_scalar(q.mu.data()[i], q.xi.data()[i], p.mu.data()[i], p.xi.data()[i]);
    }
    Ok(Kl {
        total: per_dim.sum(),
        per_dim,
    })
}

pub(crate) fn gaussian_kl_scalar(mu: f64, xi: f64, mu0: f64, xi0: f64) -> f64 {
    let a = (mu - mu0) * (-xi0).exp();
    let d = xi - xi0;
    0.5 * (a * a + (2.0 * d).exp() - 2.0 * d - 1.0)
}

/// Fisher metric of the Gaussian family in `(mu, xi)` coordinates:
/// `(e^{-2xi}, 2)`.
pub fn gaussian_fisher(p: &GaussianParams) -> (Tensor, Tensor) {
    (p.xi.map(|x| (-2.0 * x).exp()), Tensor::full(p.xi.shape(), 2.0))
}

/// `log Pois(k; rate)`.
pub fn poisson_log_pmf(k: f64, rate: f64) -> f64 {
    if rate == 0.0 {
        return if k == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k * rate.ln() - rate - libm::lgamma(k + 1.0)
}

/// `log N(z; mu, e^{2xi})`.
pub fn gaussian_log_pdf(z: f64, mu: f64, xi: f64) -> f64 {
    let s2 = (2.0 * xi).exp();
    -0.5 * (2.0 * std::f64::consts::PI).ln() - xi - (z - mu).powi(2) / (2.0 * s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Purpose;

    fn rng(id: u64) -> RngStream {
        RngStream::for_step(11, id, 0, Purpose::Oracle)
    }

    #[test]
    fn zero_rate_gives_zero_counts() {
        let u = Tensor::full(&[16], f64::NEG_INFINITY);
        let z = poisson_sample(&u, &mut rng(0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rate_guard_rejects_runaway() {
        let u = Tensor::from_vec(vec![25.0]);
        assert!(matches!(
            poisson_sample(&u, &mut rng(1)),
            Err(FondError::RateOverflow { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let u = Tensor::from_vec(vec![0.5, 2.0, 4.0, -1.0]);
        let a = poisson_sample(&u, &mut rng(5)).unwrap();
        let b = poisson_sample(&u, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let p = GaussianParams::new(Tensor::zeros(&[4]), Tensor::zeros(&[4])).unwrap();
        assert_eq!(gaussian_sample(&p, &mut rng(6)), gaussian_sample(&p, &mut rng(6)));
    }

    #[test]
    fn ptrs_branch_moments() {
        // rate 50 uses the rejection sampler
        let mut r = rng(9);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let k = poisson_draw(50.0, &mut r).unwrap();
            s += k;
            s2 += k * k;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 50.0).abs() < 0.1, "mean {mean}");
        assert!((var - 50.0).abs() < 1.0, "var {var}");
    }

    #[test]
    fn poisson_kl_values() {
        let same = Tensor::from_vec(vec![0.3, -1.0]);
        assert_eq!(poisson_kl(&same, &same).unwrap().total, 0.0);
        let kl = poisson_kl(&Tensor::from_vec(vec![2f64.ln()]), &Tensor::from_vec(vec![0.0]))
            .unwrap()
            .total;
        assert!((kl - (1.0 + 2.0 * (2f64.ln() - 1.0))).abs() < 1e-14);
        assert!((kl - 0.386_294_361_1).abs() < 1e-9);
        let kl2 = poisson_kl(&Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![2f64.ln()]))
            .unwrap()
            .total;
        assert!((kl2 - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-14);
        assert!(poisson_kl(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn gaussian_kl_values() {
        let q = GaussianParams::new(Tensor::from_vec(vec![0.2]), Tensor::from_vec(vec![-0.4]))
            .unwrap();
        assert_eq!(gaussian_kl(&q, &q).unwrap().total, 0.0);
        let p = GaussianParams::new(Tensor::zeros(&[1]), Tensor::zeros(&[1])).unwrap();
        let q1 = GaussianParams::new(Tensor::from_vec(vec![1.0]), Tensor::zeros(&[1])).unwrap();
        assert!((gaussian_kl(&q1, &p).unwrap().total - 0.5).abs() < 1e-15);
        let q2 =
            GaussianParams::new(Tensor::zeros(&[1]), Tensor::from_vec(vec![2f64.ln()])).unwrap();
        let expect = 0.5 * (4.0 - 2.0 * 2f64.ln() - 1.0);
        assert!((gaussian_kl(&q2, &p).unwrap().total - expect).abs() < 1e-14);
        assert!((expect - 0.806_852_819).abs() < 1e-8);
    }

    #[test]
    fn fisher_values() {
        let f = poisson_fisher(&Tensor::from_vec(vec![0.0, 3f64.ln()]));
        assert_eq!(f.data()[0], 1.0);
        assert!((f.data()[1] - 3.0).abs() < 1e-14);
        let p = GaussianParams::new(Tensor::zeros(&[2]), Tensor::from_vec(vec![0.0, 2f64.ln()]))
            .unwrap();
        let (fm, fx) = gaussian_fisher(&p);
        assert_eq!(fm.data()[0], 1.0);
        assert!((fm.data()[1] - 0.25).abs() < 1e-15);
        assert_eq!(fx.data(), &[2.0, 2.0]);
    }

    #[test]
    fn degenerate_gaussian_returns_mean() {
        let p = GaussianParams::new(
            Tensor::from_vec(vec![1.5, -2.0]),
            Tensor::full(&[2], f64::NEG_INFINITY),
        )
        .unwrap();
        let (z, _) = gaussian_sample(&p, &mut rng(3));
        assert_eq!(z.data(), &[1.5, -2.0]);
    }
}
