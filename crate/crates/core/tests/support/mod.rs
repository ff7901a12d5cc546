//! Shared helpers for the integration suites: fixed-seed proptest config,
//! independent reference implementations and finite-difference checks.
#![allow(dead_code)]

use fond::distributions::{GaussianParams, PoissonParams};
use fond::dynamics::ModelKind;
use fond::learning::{backward, unroll, BpttOptions};
use fond::model::{init_params, DecoderKind, GenerativeParams, LatentFamily, Prior};
use fond::numerics::{Purpose, RngStream, Tensor};
use proptest::test_runner::{Config, RngSeed};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

pub const MASTER_SEED: u64 = 20_240_611;

pub fn config(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(MASTER_SEED),
        failure_persistence: None,
        ..Config::default()
    }
}

pub fn rng(seed: u64) -> RngStream {
    RngStream::for_step(seed, 0, 0, Purpose::Oracle)
}

pub fn normal_tensor(shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v = scale * g;
    }
    t
}

/// Random model with perturbed prior and likelihood scale.
pub fn random_params(seed: u64, m: usize, k: usize, dec: DecoderKind, family: LatentFamily) -> GenerativeParams {
    let mut r = rng(seed);
    let mut p = init_params(m, k, dec, family, &mut r).unwrap();
    match &mut p.prior {
        Prior::Poisson(pp) => *pp = PoissonParams::new(normal_tensor(&[k], 0.4, &mut r)),
        Prior::Gaussian(g) => {
            *g = GaussianParams::new(normal_tensor(&[k], 0.3, &mut r), normal_tensor(&[k], 0.3, &mut r)).unwrap()
        }
    }
    p.log_sigma_x = normal_tensor(&[m], 0.1, &mut r);
    p
}

/// Largest relative error between `backward` and central differences of the
/// unrolled loss, over every parameter entry.
pub fn max_fd_error(p: &GenerativeParams, x: &Tensor, kind: ModelKind, opts: &BpttOptions) -> f64 {
    let tape = unroll(x, p, kind, opts).unwrap();
    let g = backward(&tape, p).unwrap();
    let loss = |q: &GenerativeParams| unroll(x, q, kind, opts).unwrap().total();
    let mut worst: f64 = 0.0;
    for ti in 0..g.tensors.len() {
        for idx in 0..g.tensors[ti].len() {
            let h = 1e-6;
            let mut pp = p.clone();
            pp.tensors_mut()[ti].data_mut()[idx] += h;
            let mut pm = p.clone();
            pm.tensors_mut()[ti].data_mut()[idx] -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let an = g.tensors[ti].data()[idx];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    worst
}

/// Adamax written out with plain scalars.
pub fn adamax_reference(params: &mut [f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64) {
    let n = params.len();
    let mut m = vec![0.0; n];
    let mut u = vec![0.0f64; n];
    for (t, g) in grads.iter().enumerate() {
        let step = (t + 1) as i32;
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            u[i] = f64::max(b2 * u[i], g[i].abs());
            params[i] -= lr / (1.0 - b1.powi(step)) * m[i] / (u[i] + 1e-12);
        }
    }
}

/// Mean and standard error of `f(sample)` over `n` draws.
pub fn mc<F: FnMut(&mut RngStream) -> f64>(n: usize, seed: u64, mut f: F) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let v = f(&mut r);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo `KL(Pois(e^u) ‖ Pois(e^u0))`: log-ratio `k(u−u0) − (e^u − e^u0)`.
pub fn poisson_kl_mc(u: f64, u0: f64, n: usize, seed: u64) -> (f64, f64) {
    let (r, r0) = (u.exp(), u0.exp());
    let d = Poisson::new(r).unwrap();
    mc(n, seed, |g| {
        let k: f64 = d.sample(g);
        k * (u - u0) - (r - r0)
    })
}

/// Monte Carlo Gaussian KL from the log-density ratio.
pub fn gaussian_kl_mc(mu: f64, xi: f64, mu0: f64, xi0: f64, n: usize, seed: u64) -> (f64, f64) {
    let (s, s0) = (xi.exp(), xi0.exp());
    mc(n, seed, |g| {
        let e: f64 = StandardNormal.sample(g);
        let z = mu + s * e;
        let lq = -xi - 0.5 * e * e;
        let lp = -xi0 - 0.5 * ((z - mu0) / s0).powi(2);
        lq - lp
    })
}

/// Monte Carlo Poisson Fisher in log-rate: `E[(k − e^u)²]`.
pub fn poisson_fisher_mc(u: f64, n: usize, seed: u64) -> (f64, f64) {
    let r = u.exp();
    let d = Poisson::new(r).unwrap();
    mc(n, seed, |g| {
        let k: f64 = d.sample(g);
        (k - r).powi(2)
    })
}

/// Monte Carlo Gaussian Fisher diagonal in `(µ, ξ)`: squared scores.
pub fn gaussian_fisher_mc(mu: f64, xi: f64, n: usize, seed: u64) -> ((f64, f64), (f64, f64)) {
    let s = xi.exp();
    let f_mu = mc(n, seed, |g| {
        let e: f64 = StandardNormal.sample(g);
        let z = mu + s * e;
        ((z - mu) / (s * s)).powi(2)
    });
    let f_xi = mc(n, seed + 1, |g| {
        let e: f64 = StandardNormal.sample(g);
        (e * e - 1.0).powi(2)
    });
    (f_mu, f_xi)
}

/// Uniform integer in `[lo, hi)`.
pub fn uniform(r: &mut RngStream, lo: usize, hi: usize) -> usize {
    r.random_range(lo..hi)
}
