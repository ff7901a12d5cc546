//! Acceptance criteria, one `PASS`/`FAIL` line each.
//!
//! Criteria 1–4 and 12 run with the normal suite. The experiment criteria
//! (5–11) train full models and are ignored by default:
//!
//! ```text
//! cargo test --release -p fond --test acceptance -- --ignored --test-threads=1 --nocapture
//! ```
//!
//! Trained checkpoints are cached under `target/acceptance/` and reused when
//! their stored config matches.

mod support;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};

use fond::analysis::{convergence_index, is_oriented, probe_classifier};
use fond::cli::{
    evaluate, load_data, run_contrast, train_experiment, Checkpoint, ContrastOptions, DataSpec,
    EvalOptions, EvalReport, ExperimentConfig, MapDecode,
};
use fond::distributions::{gaussian_fisher, gaussian_kl, poisson_fisher, poisson_kl, GaussianParams};
use fond::dynamics::{ipvae_step, rate_step, InferenceState, Mode, ModelKind, Sampler};
use fond::learning::{BpttOptions, TrainConfig};
use fond::model::{DecoderKind, LatentFamily};
use fond::numerics::Tensor;
use support::{max_fd_error, normal_tensor, random_params, rng};

fn report(n: usize, pass: bool, detail: &str) {
    println!("criterion {n:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn conclude(n: usize, pass: bool, detail: String) {
    report(n, pass, &detail);
    assert!(pass, "criterion {n}: {detail}");
}

// 1. closed forms against Monte Carlo

const MC_SAMPLES: usize = 1_000_000;
const MC_SIGMAS: f64 = 3.0;

#[test]
fn c01_kl_and_fisher_match_monte_carlo() {
    let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut note = |closed: f64, (mean, se): (f64, f64)| {
        checks += 1;
        let z = if se > 0.0 { (closed - mean).abs() / se } else if closed == mean { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    };
    for (i, &a) in grid.iter().enumerate() {
        for (j, &b) in grid.iter().enumerate() {
            let seed = (i * 5 + j) as u64;
            // Poisson: u = a, prior u0 = b
            let kl = poisson_kl(&Tensor::from_vec(vec![a]), &Tensor::from_vec(vec![b])).unwrap().total;
            note(kl, support::poisson_kl_mc(a, b, MC_SAMPLES, seed));
            let f = poisson_fisher(&Tensor::from_vec(vec![a])).data()[0];
            note(f, support::poisson_fisher_mc(a, MC_SAMPLES, seed + 100));
            // Gaussian: µ = a, ξ = b/2, prior (0.2, −0.3)
            let (mu, xi, mu0, xi0) = (a, 0.5 * b, 0.2, -0.3);
            let q = GaussianParams::new(Tensor::from_vec(vec![mu]), Tensor::from_vec(vec![xi])).unwrap();
            let p = GaussianParams::new(Tensor::from_vec(vec![mu0]), Tensor::from_vec(vec![xi0])).unwrap();
            note(gaussian_kl(&q, &p).unwrap().total, support::gaussian_kl_mc(mu, xi, mu0, xi0, MC_SAMPLES, seed + 200));
            let (f_mu, f_xi) = gaussian_fisher(&q);
            let (mc_mu, mc_xi) = support::gaussian_fisher_mc(mu, xi, MC_SAMPLES, seed + 300);
            note(f_mu.data()[0], mc_mu);
            note(f_xi.data()[0], mc_xi);
        }
    }
    conclude(
        1,
        worst <= MC_SIGMAS,
        format!("{checks} closed forms vs {MC_SAMPLES} samples, worst deviation {worst:.2} SE (limit {MC_SIGMAS})"),
    );
}

// 2. log-potential and rate updates

#[test]
fn c02_log_and_rate_forms_agree() {
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..100u64 {
        let (m, k) = (8 + (seed % 5) as usize, 4 + (seed % 7) as usize);
        let p = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let x = normal_tensor(&[4, m], 1.0, &mut rng(seed + 1_000));
        let mut s = InferenceState::initial(&p, ModelKind::Ipvae, 4).unwrap();
        let sampler = Sampler::keyed(seed);
        for _ in 0..25 {
            let r = s.rates().unwrap();
            let next = ipvae_step(&s, &x, &p, Mode::Online, &sampler).unwrap();
            let a = rate_step(&r, &next.z, &x, &p).unwrap();
            let b = next.rates().unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                worst = worst.max((u - v).abs() / v.abs());
            }
            steps += 4;
            s = next;
        }
    }
    conclude(2, worst <= 1e-12, format!("{steps} steps, max relative error {worst:.2e} (limit 1e-12)"));
}

// 3. BPTT gradients against central differences

#[test]
fn c03_gradients_match_finite_differences() {
    let (k, m, t) = (4, 8, 3);
    let mut worst_g: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for seed in 0..20u64 {
        let x = normal_tensor(&[3, m], 1.0, &mut rng(seed + 500));
        let pg = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Gaussian);
        let opts = BpttOptions::new(t, 1.5, Sampler::keyed(seed));
        worst_g = worst_g.max(max_fd_error(&pg, &x, ModelKind::Igvae, &opts));
        let pp = random_params(seed, m, k, DecoderKind::Linear, LatentFamily::Poisson);
        let opts = BpttOptions::new(t, 1.5, Sampler::Mean);
        worst_p = worst_p.max(max_fd_error(&pp, &x, ModelKind::Ipvae, &opts));
    }
    conclude(
        3,
        worst_g <= 1e-4 && worst_p <= 1e-4,
        format!("20 seeds, K=4 M=8 T=3: Gaussian {worst_g:.2e}, Poisson MAP surrogate {worst_p:.2e} (limit 1e-4)"),
    );
}

// 4. convergence detector

#[test]
fn c04_convergence_detector_cases() {
    let flat = vec![0.3; 1000];
    let ramp: Vec<f64> = (0..1000).map(|t| 1e-3 * t as f64).collect();
    let knee: Vec<f64> = (0..1000).map(|t| 0.01 * t.min(200) as f64).collect();
    let got = [
        convergence_index(&flat).unwrap(),
        convergence_index(&ramp).unwrap(),
        convergence_index(&knee).unwrap(),
    ];
    conclude(4, got == [60, 1000, 260], format!("constant / ramp / knee → {got:?} (expected [60, 1000, 260])"));
}

// 12. property suites

/// Runs the compiled `properties` test binary that sits next to this one.
#[test]
fn c12_property_suites() {
    let me = std::env::current_exe().unwrap();
    let dir = me.parent().unwrap();
    let newest = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            name.starts_with("properties-") && p.extension().is_none()
        })
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok());
    let Some(bin) = newest else {
        report(12, false, "properties test binary not built; run `cargo test -p fond --test properties`");
        panic!("properties binary missing");
    };
    let out = Command::new(&bin).arg("--test-threads=1").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    let summary = text.lines().rev().find(|l| l.starts_with("test result")).unwrap_or("no summary").to_string();
    conclude(12, out.status.success(), format!("1000 cases per property, fixed master seed: {summary}"));
}

// experiment criteria

const PATCH_K: usize = 256;
const PATCH_T: usize = 16;
const PATCH_EPOCHS: usize = 100;
const PATCH_N_TRAIN: usize = 20_000;
const PATCH_N_TEST: usize = 2_000;
const T_TEST: usize = 1000;
const SWEEP_FACTORS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn run_dir(name: &str) -> PathBuf {
    workspace().join("target/acceptance").join(name)
}

fn patch_config(name: &str, kind: ModelKind, beta: f64) -> ExperimentConfig {
    let text = format!(
        "[model]\nkind = \"{kind}\"\nlatent_dim = {PATCH_K}\n[data]\nsource = \"patches\"\ndir = \"x\"\n"
    );
    let mut cfg = ExperimentConfig::parse(&text).unwrap();
    cfg.inference.t_test = T_TEST;
    cfg.inference.map_decode = MapDecode::Both;
    cfg.train = TrainConfig {
        epochs: PATCH_EPOCHS,
        t_train: PATCH_T,
        beta,
        ..TrainConfig::default()
    };
    cfg.data = DataSpec::Patches {
        dir: workspace().join("data/natural"),
        patch: 16,
        n_train: PATCH_N_TRAIN,
        n_test: PATCH_N_TEST,
    };
    cfg.run.out_dir = run_dir(name);
    cfg
}

fn mnist_config() -> ExperimentConfig {
    let d = workspace().join("data/mnist");
    let text = "[model]\nkind = \"ipvae\"\nlatent_dim = 512\n[data]\nsource = \"idx\"\ntrain_images = \"a\"\ntest_images = \"b\"\n";
    let mut cfg = ExperimentConfig::parse(text).unwrap();
    cfg.train = TrainConfig {
        epochs: 100,
        t_train: 32,
        beta: 32.0,
        ..TrainConfig::default()
    };
    cfg.data = DataSpec::Idx {
        train_images: d.join("train-images-idx3-ubyte"),
        train_labels: Some(d.join("train-labels-idx1-ubyte")),
        test_images: d.join("t10k-images-idx3-ubyte"),
        test_labels: Some(d.join("t10k-labels-idx1-ubyte")),
        limit_train: None,
        limit_test: None,
    };
    cfg.run.out_dir = run_dir("mnist");
    cfg
}

struct Trained {
    checkpoint: Checkpoint,
    eval: EvalReport,
    diverged: Option<String>,
}

/// Trains (or reloads) the named run and evaluates it at `T_TEST`.
fn trained(name: &str, cfg: &ExperimentConfig) -> &'static Trained {
    static CACHE: OnceLock<Mutex<HashMap<String, &'static Trained>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().unwrap().get(name) {
        return t;
    }
    let path = cfg.run.out_dir.join("checkpoint.fond");
    let cached = Checkpoint::load(&path).ok().filter(|ck| &ck.config == cfg);
    let (checkpoint, diverged) = match cached {
        Some(ck) => {
            eprintln!("{name}: reusing {}", path.display());
            (ck, None)
        }
        None => {
            let (train_set, _) = load_data(cfg).unwrap();
            eprintln!("{name}: training on {} × {}", train_set.len(), train_set.dim());
            let run = train_experiment(cfg, &train_set, &mut |row, _| {
                eprintln!("{name} epoch {:>3} loss {:.3} ({:.0}s)", row.epoch, row.loss, row.wallclock_s);
                Ok(())
            })
            .unwrap();
            run.checkpoint.save(&path).unwrap();
            (run.checkpoint, run.diverged.map(|e| e.to_string()))
        }
    };
    let test = fond::cli::load_test_data(&checkpoint).unwrap();
    let eval = evaluate(&checkpoint, &test.samples, &EvalOptions::from_config(cfg)).unwrap();
    fond::cli::write_eval_outputs(&cfg.run.out_dir, &checkpoint, &eval).unwrap();
    let t: &'static Trained = Box::leak(Box::new(Trained {
        checkpoint,
        eval,
        diverged,
    }));
    cache.lock().unwrap().insert(name.to_string(), t);
    t
}

fn ipvae() -> &'static Trained {
    trained("ipvae", &patch_config("ipvae", ModelKind::Ipvae, 1.5 * PATCH_T as f64))
}

fn igvae() -> &'static Trained {
    trained("igvae", &patch_config("igvae", ModelKind::Igvae, 0.5 * PATCH_T as f64))
}

fn sampled(t: &Trained) -> &fond::cli::MetricsRow {
    t.eval.metric("sampled").unwrap()
}

fn map(t: &Trained) -> &fond::cli::MetricsRow {
    t.eval.metric("map").unwrap()
}

#[test]
#[ignore = "trains two patch models"]
fn c05_patch_experiment() {
    let (p, g) = (ipvae(), igvae());
    let (ps, gs) = (sampled(p), sampled(g));
    let ok_p = p.diverged.is_none() && ps.r2 >= 0.70 && ps.sparsity >= 0.55 && ps.converge_t < 300;
    let ok_g = g.diverged.is_none() && gs.r2 > ps.r2 && gs.sparsity < 0.05;
    conclude(
        5,
        ok_p && ok_g,
        format!(
            "iP-VAE R² {:.3} (≥ 0.70) sparsity {:.3} (≥ 0.55) convergence {} (< 300); \
             iG-VAE R² {:.3} (> iP) sparsity {:.3} (≈ 0)",
            ps.r2, ps.sparsity, ps.converge_t, gs.r2, gs.sparsity
        ),
    );
}

/// Fraction of the 64 most active dictionary columns that are oriented.
fn oriented_fraction(t: &Trained) -> f64 {
    let phi = t.checkpoint.params.decoder.dictionary().unwrap();
    let act = &t.eval.unit_activity;
    let mut order: Vec<usize> = (0..act.len()).collect();
    order.sort_by(|&a, &b| act[b].abs().total_cmp(&act[a].abs()));
    let top = &order[..64.min(order.len())];
    let hits = top
        .iter()
        .filter(|&&j| {
            let col: Vec<f64> = (0..phi.rows()).map(|i| phi.get(i, j)).collect();
            is_oriented(&col, 16).unwrap()
        })
        .count();
    hits as f64 / top.len() as f64
}

#[test]
#[ignore = "trains two patch models"]
fn c06_oriented_dictionary() {
    let (fp, fg) = (oriented_fraction(ipvae()), oriented_fraction(igvae()));
    let (up, ug) = (1.0 - fp, 1.0 - fg);
    conclude(
        6,
        fp >= 0.5 && ug > 2.0 * up,
        format!("oriented among top-64: iP-VAE {fp:.3} (≥ 0.5); unstructured iG-VAE {ug:.3} vs iP-VAE {up:.3} (> 2×)"),
    );
}

#[test]
#[ignore = "trains two patch models"]
fn c07_map_beats_sampled() {
    let rows: Vec<(&str, f64, f64)> = [("iP-VAE", ipvae()), ("iG-VAE", igvae())]
        .iter()
        .map(|(n, t)| (*n, map(t).r2, sampled(t).r2))
        .collect();
    let pass = rows.iter().all(|(_, m, s)| m >= s);
    let detail = rows
        .iter()
        .map(|(n, m, s)| format!("{n} MAP {m:.3} vs sampled {s:.3}"))
        .collect::<Vec<_>>()
        .join("; ");
    conclude(7, pass, detail);
}

#[test]
#[ignore = "trains four patch models"]
fn c08_sparsity_increases_with_beta() {
    let mut sp = Vec::new();
    for f in SWEEP_FACTORS {
        let name = format!("sweep_b{f}");
        let t = trained(&name, &patch_config(&name, ModelKind::Ipvae, f * PATCH_T as f64));
        sp.push(if t.diverged.is_some() { f64::NAN } else { sampled(t).sparsity });
    }
    let drops: Vec<f64> = sp.windows(2).map(|w| w[0] - w[1]).filter(|d| *d > 0.0).collect();
    let pass = sp.iter().all(|s| s.is_finite()) && drops.len() <= 1 && drops.iter().all(|d| *d <= 0.02);
    conclude(
        8,
        pass,
        format!("β factors {SWEEP_FACTORS:?} at T_train=16: sparsity {sp:.3?}, inversions {drops:.3?}"),
    );
}

#[test]
#[ignore = "trains a patch model"]
fn c09_improves_beyond_training_horizon() {
    let t = ipvae();
    let r2 = t.eval.r2_series("sampled");
    let (at_train, at_end) = (r2[PATCH_T - 1], r2[T_TEST - 1]);
    conclude(9, at_end > at_train, format!("R² at t=16 {at_train:.3}, at t=1000 {at_end:.3}"));
}

#[test]
#[ignore = "trains an MNIST model"]
fn c10_mnist() {
    let cfg = mnist_config();
    let t = trained("mnist", &cfg);
    let s = sampled(t);
    // logistic probe: fit on training-set codes, score on test-set codes
    let (train_set, test_set) = load_data(&cfg).unwrap();
    let opts = EvalOptions {
        map_decode: MapDecode::On,
        ..EvalOptions::from_config(&cfg)
    };
    let train_codes = evaluate(&t.checkpoint, &train_set.samples, &opts).unwrap().final_map;
    let k = train_codes.cols();
    let mut rows = train_codes.into_data();
    rows.extend_from_slice(t.eval.final_map.data());
    let codes = Tensor::new(vec![rows.len() / k, k], rows).unwrap();
    let mut labels = train_set.labels.clone().unwrap();
    labels.extend(test_set.labels.clone().unwrap());
    let frac = train_set.len() as f64 / labels.len() as f64;
    let acc = probe_classifier(&codes, &labels, frac).unwrap();
    let pass = t.diverged.is_none() && s.per_dim_mse <= 9e-3 && s.r2 >= 0.89 && s.sparsity >= 0.70 && acc >= 0.92;
    conclude(
        10,
        pass,
        format!(
            "MSE {:.2e} (≤ 9e-3), R² {:.3} (≥ 0.89), sparsity {:.3} (≥ 0.70), probe {:.2}% (≥ 92%); MAP R² {:.3}",
            s.per_dim_mse,
            s.r2,
            s.sparsity,
            100.0 * acc,
            map(t).r2
        ),
    );
}

#[test]
#[ignore = "trains a patch model"]
fn c11_contrast_latency() {
    let t = ipvae();
    let rep = run_contrast(&t.checkpoint, &ContrastOptions::default()).unwrap();
    let peaks: Vec<f64> = rep.mean_peak.iter().map(|(_, p)| *p).collect();
    let decreasing = peaks.windows(2).all(|w| w[1] < w[0]);
    let gap = peaks[0] - peaks[peaks.len() - 1];
    conclude(
        11,
        decreasing && gap > 0.0,
        format!("mean peak (cycles) at contrasts {:?}: {peaks:.4?}; 15%→100% gap {gap:.4}", ContrastOptions::default().contrasts),
    );
}
