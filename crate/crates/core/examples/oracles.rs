//! Closed-form KL divergences and Fisher information for the Poisson and
//! Gaussian posteriors, checked against Monte Carlo estimates.
//!
//! cargo run --release --example oracles

use fond::distributions::{gaussian_fisher, gaussian_kl, poisson_fisher, poisson_kl, GaussianParams};
use fond::numerics::{Purpose, RngStream, Tensor};
use rand_distr::{Distribution, Poisson, StandardNormal};

const N: usize = 200_000;

fn mean_se(mut f: impl FnMut() -> f64) -> (f64, f64) {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..N {
        let v = f();
        s += v;
        s2 += v * v;
    }
    let m = s / N as f64;
    (m, ((s2 / N as f64 - m * m) / N as f64).sqrt())
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec(vec![v])
}

fn main() -> fond::Result<()> {
    let mut rng = RngStream::for_step(0, 0, 0, Purpose::Oracle);
    println!("Poisson, log-rate u against prior u0");
    println!("{:>5} {:>5} {:>10} {:>10} {:>8}   {:>8} {:>8}", "u", "u0", "KL", "MC", "±SE", "Fisher", "MC");
    for (u, u0) in [(-1.0, 0.0), (0.0, 0.0), (0.5, -0.5), (1.0, 0.3), (2.0, 1.0)] {
        let kl = poisson_kl(&scalar(u), &scalar(u0))?.total;
        let (r, r0) = (f64::exp(u), f64::exp(u0));
        let d = Poisson::new(r).unwrap();
        let (mc, se) = mean_se(|| {
            let k: f64 = d.sample(&mut rng);
            k * (u - u0) - (r - r0)
        });
        let fisher = poisson_fisher(&scalar(u)).data()[0];
        let (mf, _) = mean_se(|| {
            let k: f64 = d.sample(&mut rng);
            (k - r).powi(2)
        });
        println!("{u:>5.1} {u0:>5.1} {kl:>10.5} {mc:>10.5} {se:>8.5}   {fisher:>8.4} {mf:>8.4}");
    }

    println!("\nGaussian (µ, ξ = log σ) against prior (0, 0)");
    println!("{:>5} {:>5} {:>10} {:>10} {:>8}   {:>8} {:>8}", "µ", "ξ", "KL", "MC", "±SE", "F_µµ", "F_ξξ");
    let prior = GaussianParams::new(scalar(0.0), scalar(0.0))?;
    for (mu, xi) in [(0.0, 0.0), (1.0, 0.0), (0.0, -0.5), (-1.0, 0.4), (2.0, -1.0)] {
        let q = GaussianParams::new(scalar(mu), scalar(xi))?;
        let kl = gaussian_kl(&q, &prior)?.total;
        let s = f64::exp(xi);
        let (mc, se) = mean_se(|| {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu + s * e;
            (-xi - 0.5 * e * e) - (-0.5 * z * z)
        });
        let (f_mu, f_xi) = gaussian_fisher(&q);
        println!(
            "{mu:>5.1} {xi:>5.1} {kl:>10.5} {mc:>10.5} {se:>8.5}   {:>8.4} {:>8.4}",
            f_mu.data()[0],
            f_xi.data()[0]
        );
    }
    Ok(())
}
