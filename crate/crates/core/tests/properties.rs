//! Randomized invariants for every module, 1000 cases each from a fixed
//! master seed.

mod support;

use std::f64::consts::PI;
use std::path::Path;

use fond::analysis::{detect_convergence, distance_to_optimum, r_squared};
use fond::cli::Checkpoint;
use fond::cli::ExperimentConfig;
use fond::data::{fit_whitening, grating, read_idx, whiten, write_idx, GratingSpec, IdxArray};
use fond::distributions::{gaussian_kl, poisson_fisher, poisson_kl, poisson_sample, GaussianParams};
use fond::dynamics::{KlTarget, 
    igvae_step, ipvae_step, rate_step, InferenceState, Latent, Mode, ModelKind, Sampler,
};
use fond::learning::{unroll, BpttOptions};
use fond::model::{decode, feedback, recon_loss, DecoderKind, LatentFamily};
use fond::numerics::{adamax_step, gemm, matmul, OptimizerState, Tensor};
use proptest::prelude::*;
use support::{config, max_fd_error, normal_tensor, random_params, rng};

const CASES: u32 = 1000;

fn frob_to_identity(x: &Tensor) -> f64 {
    let (n, m) = (x.rows(), x.cols());
    let mean = x.sum_rows().scale(1.0 / n as f64);
    let mut c = x.clone();
    for row in c.data_mut().chunks_exact_mut(m) {
        for (v, mu) in row.iter_mut().zip(mean.data()) {
            *v -= mu;
        }
    }
    let mut cov = Tensor::zeros(&[m, m]);
    gemm(1.0 / n as f64, &c, true, &c, false, 0.0, &mut cov).unwrap();
    cov.sub(&Tensor::eye(m)).unwrap().norm()
}

proptest! {
    #![proptest_config(config(CASES))]

    // numerics

    #[test]
    fn operations_are_deterministic(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let a = normal_tensor(&[rows, cols], 1.0, &mut rng(seed));
        let b = normal_tensor(&[cols, rows], 1.0, &mut rng(seed ^ 1));
        prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        let u = a.map(|v| v.clamp(-3.0, 3.0));
        let s1 = poisson_sample(&u, &mut rng(seed)).unwrap();
        let s2 = poisson_sample(&u, &mut rng(seed)).unwrap();
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn matmul_identity_and_zeros_are_exact(seed in any::<u64>(), m in 1usize..7, n in 1usize..7) {
        let a = normal_tensor(&[m, n], 2.0, &mut rng(seed));
        prop_assert_eq!(&matmul(&a, &Tensor::eye(n)).unwrap(), &a);
        prop_assert_eq!(&matmul(&Tensor::eye(m), &a).unwrap(), &a);
        prop_assert_eq!(matmul(&a, &Tensor::zeros(&[n, 3])).unwrap(), Tensor::zeros(&[m, 3]));
        // (I·A)·I = I·(A·I)
        let left = matmul(&matmul(&Tensor::eye(m), &a).unwrap(), &Tensor::eye(n)).unwrap();
        let right = matmul(&Tensor::eye(m), &matmul(&a, &Tensor::eye(n)).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn adamax_matches_scalar_reference(seed in any::<u64>(), steps in 1usize..8, lr in 1e-4f64..0.1) {
        let mut r = rng(seed);
        let start = normal_tensor(&[5], 1.0, &mut r);
        let grads: Vec<Vec<f64>> = (0..steps).map(|_| normal_tensor(&[5], 1.0, &mut r).into_data()).collect();
        let mut p = start.clone();
        let mut st = OptimizerState::new(&[5], 0.9, 0.999);
        for g in &grads {
            adamax_step(&mut st, &mut p, &Tensor::from_vec(g.clone()), lr).unwrap();
        }
        let mut reference = start.into_data();
        support::adamax_reference(&mut reference, &grads, lr, 0.9, 0.999);
        for (a, b) in p.data().iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    // distributions

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(seed in any::<u64>()) {
        let mut r = rng(seed);
        let u = normal_tensor(&[10], 2.0, &mut r);
        let u0 = normal_tensor(&[10], 2.0, &mut r);
        prop_assert!(poisson_kl(&u, &u0).unwrap().per_dim.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(poisson_kl(&u, &u).unwrap().total, 0.0);
        let q = GaussianParams::new(normal_tensor(&[10], 2.0, &mut r), normal_tensor(&[10], 1.0, &mut r)).unwrap();
        let p = GaussianParams::new(normal_tensor(&[10], 2.0, &mut r), normal_tensor(&[10], 1.0, &mut r)).unwrap();
        prop_assert!(gaussian_kl(&q, &p).unwrap().per_dim.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(gaussian_kl(&q, &q).unwrap().total, 0.0);
    }

    #[test]
    fn poisson_kl_matches_monte_carlo(u in -1.5f64..1.5, u0 in -1.5f64..1.5, seed in any::<u64>()) {
        let closed = poisson_kl(&Tensor::from_vec(vec![u]), &Tensor::from_vec(vec![u0])).unwrap().total;
        let (mean, se) = support::poisson_kl_mc(u, u0, 20_000, seed);
        prop_assert!((closed - mean).abs() <= 5.0 * se + 1e-12, "{} vs {} ± {}", closed, mean, se);
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo(mu in -2f64..2.0, xi in -1f64..1.0, mu0 in -2f64..2.0, xi0 in -1f64..1.0, seed in any::<u64>()) {
        let q = GaussianParams::new(Tensor::from_vec(vec![mu]), Tensor::from_vec(vec![xi])).unwrap();
        let p = GaussianParams::new(Tensor::from_vec(vec![mu0]), Tensor::from_vec(vec![xi0])).unwrap();
        let closed = gaussian_kl(&q, &p).unwrap().total;
        let (mean, se) = support::gaussian_kl_mc(mu, xi, mu0, xi0, 20_000, seed);
        prop_assert!((closed - mean).abs() <= 5.0 * se + 1e-12, "{} vs {} ± {}", closed, mean, se);
    }

    #[test]
    fn poisson_fisher_is_kl_curvature(u0 in -3f64..3.0) {
        let h = 1e-4;
        let kl = |u: f64| poisson_kl(&Tensor::from_vec(vec![u]), &Tensor::from_vec(vec![u0])).unwrap().total;
        let second = (kl(u0 + h) - 2.0 * kl(u0) + kl(u0 - h)) / (h * h);
        let fisher = poisson_fisher(&Tensor::from_vec(vec![u0])).data()[0];
        prop_assert!((second - fisher).abs() <= 1e-6 * fisher.max(1.0), "{} vs {}", second, fisher);
    }

    // model

    #[test]
    fn feedback_is_negative_recon_gradient(seed in any::<u64>(), m in 2usize..17, k in 1usize..9, mlp in any::<bool>()) {
        let dec = if mlp { DecoderKind::Mlp1 } else { DecoderKind::Linear };
        let p = random_params(seed, m, k, dec, LatentFamily::Poisson);
        let mut r = rng(seed ^ 7);
        let z = normal_tensor(&[k], 1.0, &mut r);
        let x = normal_tensor(&[m], 1.0, &mut r);
        let fb = feedback(&p, &z, &x).unwrap();
        for j in 0..k {
            let h = 1e-6;
            let mut zp = z.clone();
            zp.data_mut()[j] += h;
            let mut zm = z.clone();
            zm.data_mut()[j] -= h;
            let fd = -(recon_loss(&p, &x, &zp).unwrap() - recon_loss(&p, &x, &zm).unwrap()) / (2.0 * h);
            let an = fb.data()[j];
            prop_assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1.0), "{} vs {}", fd, an);
        }
    }

    #[test]
    fn linear_decoder_superposition(seed in any::<u64>(), m in 1usize..12, k in 1usize..8) {
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let mut r = rng(seed ^ 3);
        let (z1, z2) = (normal_tensor(&[k], 1.0, &mut r), normal_tensor(&[k], 1.0, &mut r));
        let (x1, x2) = (normal_tensor(&[m], 1.0, &mut r), normal_tensor(&[m], 1.0, &mut r));
        let sum = decode(&p, &z1.add(&z2).unwrap()).unwrap();
        let parts = decode(&p, &z1).unwrap().add(&decode(&p, &z2).unwrap()).unwrap();
        prop_assert!(sum.sub(&parts).unwrap().max_abs() < 1e-10);
        // feedback is affine in x: f(x1 + x2) − f(0) = (f(x1) − f(0)) + (f(x2) − f(0))
        let zero = Tensor::zeros(&[m]);
        let f0 = feedback(&p, &z1, &zero).unwrap();
        let lhs = feedback(&p, &z1, &x1.add(&x2).unwrap()).unwrap().sub(&f0).unwrap();
        let rhs = feedback(&p, &z1, &x1).unwrap().sub(&f0).unwrap()
            .add(&feedback(&p, &z1, &x2).unwrap().sub(&f0).unwrap()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-9);
    }

    // dynamics

    #[test]
    fn log_and_rate_updates_agree(seed in any::<u64>(), m in 1usize..10, k in 1usize..8, steps in 1usize..6) {
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let x = normal_tensor(&[1, m], 1.0, &mut rng(seed ^ 5));
        let sampler = Sampler::keyed(seed);
        let mut s = InferenceState::initial(&p, ModelKind::Ipvae, 1).unwrap();
        for _ in 0..steps {
            let r = s.rates().unwrap();
            let next = ipvae_step(&s, &x, &p, Mode::Online, &sampler).unwrap();
            let via_rate = rate_step(&r, &next.z, &x, &p).unwrap();
            let via_log = next.rates().unwrap();
            for (a, b) in via_rate.data().iter().zip(via_log.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs(), "{} vs {}", a, b);
            }
            s = next;
        }
    }

    #[test]
    fn self_suppression_is_positive(seed in any::<u64>(), m in 1usize..20, k in 1usize..12) {
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let w = p.gram().unwrap();
        prop_assert!((0..k).all(|i| w.get(i, i) > 0.0));
    }

    #[test]
    fn static_fixed_point_does_not_move(seed in any::<u64>(), m in 1usize..10, k in 1usize..8, beta in 0f64..5.0) {
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let mut r = rng(seed ^ 9);
        let z_star = Tensor::new(vec![1, k], (0..k).map(|_| support::uniform(&mut r, 0, 4) as f64).collect()).unwrap();
        let x = decode(&p, &z_star).unwrap();
        let s0 = InferenceState::initial(&p, ModelKind::Ipvae, 1).unwrap();
        let s1 = ipvae_step(&s0, &x, &p, Mode::Static(beta), &Sampler::Given(z_star)).unwrap();
        prop_assert_eq!(&s1.latent, &s0.latent);
    }

    #[test]
    fn leak_vanishes_on_the_first_step(seed in any::<u64>(), m in 1usize..10, k in 1usize..8, beta in 0f64..50.0) {
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let x = normal_tensor(&[1, m], 1.0, &mut rng(seed ^ 11));
        let s0 = InferenceState::initial(&p, ModelKind::Ipvae, 1).unwrap();
        let a = ipvae_step(&s0, &x, &p, Mode::Static(beta), &Sampler::keyed(seed)).unwrap();
        let b = ipvae_step(&s0, &x, &p, Mode::Online, &Sampler::keyed(seed)).unwrap();
        prop_assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn gaussian_steps_with_frozen_noise(seed in any::<u64>()) {
        let (m, k) = (6, 4);
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Gaussian);
        let mut r = rng(seed ^ 13);
        let x = normal_tensor(&[1, m], 1.0, &mut r);
        let eps = normal_tensor(&[1, k], 1.0, &mut r);
        let s0 = InferenceState::initial(&p, ModelKind::Igvae, 1).unwrap();
        let a = igvae_step(&s0, &x, &p, Mode::Online, &Sampler::Given(eps.clone())).unwrap();
        let b = igvae_step(&s0, &x, &p, Mode::Online, &Sampler::Given(eps)).unwrap();
        prop_assert_eq!(&a.latent, &b.latent);
        let is_gaussian = matches!(a.latent, Latent::Gaussian { .. });
        prop_assert!(is_gaussian);
        // ∂F/∂µ₀ against central differences, frozen noise, T = 3
        let opts = BpttOptions::new(3, 1.0, Sampler::keyed(seed));
        let tape = unroll(&x, &p, ModelKind::Igvae, &opts).unwrap();
        let g = fond::learning::backward(&tape, &p).unwrap();
        let idx = p.named_tensors().iter().position(|(n, _)| *n == "mu0").unwrap();
        for j in 0..k {
            let h = 1e-6;
            let mut pp = p.clone();
            pp.tensors_mut()[idx].data_mut()[j] += h;
            let mut pm = p.clone();
            pm.tensors_mut()[idx].data_mut()[j] -= h;
            let fd = (unroll(&x, &pp, ModelKind::Igvae, &opts).unwrap().total()
                - unroll(&x, &pm, ModelKind::Igvae, &opts).unwrap().total()) / (2.0 * h);
            let an = g.get("mu0").unwrap().data()[j];
            prop_assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-2), "{} vs {}", fd, an);
        }
    }

    // learning

    #[test]
    fn gaussian_bptt_matches_finite_differences(seed in any::<u64>(), k in 1usize..9, t in 1usize..6, relu in any::<bool>(), leak in 0f64..1.0) {
        let (kind, dec) = if relu {
            (ModelKind::Igrelu, DecoderKind::LinearRelu)
        } else {
            (ModelKind::Igvae, DecoderKind::Linear)
        };
        let m = 6;
        let p = random_params(seed, m, k, dec, LatentFamily::Gaussian);
        let x = normal_tensor(&[2, m], 1.0, &mut rng(seed ^ 17));
        let mut opts = BpttOptions::new(t, 1.5, Sampler::keyed(seed));
        opts.mode = if leak > 0.5 { Mode::Static(leak) } else { Mode::Online };
        let err = max_fd_error(&p, &x, kind, &opts);
        prop_assert!(err <= 1e-4, "relative error {}", err);
    }

    #[test]
    fn poisson_map_surrogate_matches_finite_differences(seed in any::<u64>(), k in 1usize..9, t in 1usize..6, fixed in any::<bool>()) {
        let m = 6;
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let x = normal_tensor(&[2, m], 1.0, &mut rng(seed ^ 19));
        let mut opts = BpttOptions::new(t, 2.0, Sampler::Mean);
        opts.kl_target = if fixed { KlTarget::FixedPrior } else { KlTarget::Rolling };
        let err = max_fd_error(&p, &x, ModelKind::Ipvae, &opts);
        prop_assert!(err <= 1e-4, "relative error {}", err);
    }

    #[test]
    fn tape_replay_is_bit_exact(seed in any::<u64>(), k in 1usize..8, t in 1usize..8, gauss in any::<bool>()) {
        let m = 5;
        let (kind, fam) = if gauss {
            (ModelKind::Igvae, LatentFamily::Gaussian)
        } else {
            (ModelKind::Ipvae, LatentFamily::Poisson)
        };
        let p = random_params(seed, m, k, DecoderKind::Linear, fam);
        let x = normal_tensor(&[3, m], 1.0, &mut rng(seed ^ 23));
        let tape = unroll(&x, &p, kind, &BpttOptions::new(t, 1.0, Sampler::keyed(seed))).unwrap();
        let per_step: f64 = tape.step_losses().iter().map(|s| s.recon + s.log_norm + s.kl).sum();
        prop_assert_eq!(tape.replay(&p).unwrap(), tape.total());
        prop_assert!((per_step - tape.total()).abs() <= 1e-9 * tape.total().abs().max(1.0));
    }

    // data

    #[test]
    fn whitening_is_idempotent_in_distribution(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (n, m, rank) = (600, 12, 6);
        let mix = normal_tensor(&[rank, m], 1.0, &mut r);
        let latent = normal_tensor(&[n, rank], 1.0, &mut r);
        let noise = normal_tensor(&[n, m], 1e-3, &mut r);
        let x = matmul(&latent, &mix).unwrap().add(&noise).unwrap();
        let (w1, _) = whiten(&x).unwrap();
        let (w2, _) = whiten(&w1).unwrap();
        let (d1, d2) = (frob_to_identity(&w1), frob_to_identity(&w2));
        prop_assert!((d2 - d1).abs() < 0.1 * d1, "{} vs {}", d1, d2);
        prop_assert!(fit_whitening(&x).unwrap().retained() <= rank + 1);
    }

    #[test]
    fn gratings_have_zero_mean_over_full_cycles(cycles in 1usize..8, vertical in any::<bool>(), contrast in 0f64..1.0, frame in 0usize..100, tf in 0f64..0.5) {
        let size = 16;
        let theta = if vertical { PI / 2.0 } else { 0.0 };
        let spec = GratingSpec::new(size, theta, cycles as f64 / size as f64, tf).with_contrast(contrast);
        let g = grating(&spec, frame);
        prop_assert!((g.sum() / g.len() as f64).abs() < 1e-6);
    }

    #[test]
    fn idx_round_trip_is_bit_exact(seed in any::<u64>(), n in 0usize..5, r in 1usize..6, c in 1usize..6) {
        let mut g = rng(seed);
        let data: Vec<u8> = (0..n * r * c).map(|_| support::uniform(&mut g, 0, 256) as u8).collect();
        let arr = IdxArray { dims: vec![n, r, c], data };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.idx");
        write_idx(&path, &arr).unwrap();
        prop_assert_eq!(read_idx(&path).unwrap(), arr);
    }

    // analysis

    #[test]
    fn convergence_ignores_offsets(seed in any::<u64>(), len in 60usize..400, offset in -10f64..10.0) {
        let mut r = rng(seed);
        let noise = normal_tensor(&[len], 1e-4, &mut r);
        let rate = 0.01 + 0.05 * support::uniform(&mut r, 0, 10) as f64;
        let trace: Vec<f64> = (0..len).map(|t| 1.0 - (-rate * t as f64).exp() + noise.data()[t]).collect();
        let shifted: Vec<f64> = trace.iter().map(|v| v + offset).collect();
        prop_assert_eq!(
            detect_convergence(&trace, 60, 1e-5, 5).unwrap(),
            detect_convergence(&shifted, 60, 1e-5, 5).unwrap()
        );
    }

    #[test]
    fn distance_decreases_in_each_argument(a in 0f64..1.0, b in 0f64..1.0, d in 1e-6f64..1.0) {
        let base = distance_to_optimum(a, b);
        prop_assert!(distance_to_optimum((a + d).min(1.0), b) <= base);
        prop_assert!(distance_to_optimum(a, (b + d).min(1.0)) <= base);
        if a + d <= 1.0 {
            prop_assert!(distance_to_optimum(a + d, b) < base);
        }
    }

    #[test]
    fn r_squared_ignores_common_offsets(seed in any::<u64>(), n in 2usize..30, c in -100f64..100.0) {
        let mut r = rng(seed);
        let x = normal_tensor(&[n], 1.0, &mut r);
        let xh = x.add(&normal_tensor(&[n], 0.3, &mut r)).unwrap();
        let a = r_squared(x.data(), xh.data()).unwrap();
        let b = r_squared(x.map(|v| v + c).data(), xh.map(|v| v + c).data()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    // cli

    #[test]
    fn checkpoint_bytes_are_stable(seed in any::<u64>(), m in 1usize..10, k in 1usize..6, gauss in any::<bool>(), beta in 0f64..100.0) {
        let kind = if gauss { "igvae" } else { "ipvae" };
        let text = format!("[model]\nkind = \"{kind}\"\nlatent_dim = {k}\n[train]\nbeta = {beta}\n[data]\nsource = \"patches\"\ndir = \"d\"\n[run]\nseed = {}\n", seed >> 1);
        let config = ExperimentConfig::parse(&text).unwrap();
        let fam = if gauss { LatentFamily::Gaussian } else { LatentFamily::Poisson };
        let ck = Checkpoint { config, params: random_params(seed, m, k, DecoderKind::Linear, fam), whitening: None };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
