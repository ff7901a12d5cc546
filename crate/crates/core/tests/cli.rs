//! End-to-end runs of the `fond` binary on tiny synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fond::cli::{evaluate, load_test_data, Checkpoint, EvalOptions, MapDecode};

const BIN: &str = env!("CARGO_BIN_EXE_fond");

/// Smooth 32×32 PGM images: a few sinusoids plus a little texture.
fn write_images(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..3u32 {
        let mut bytes = b"P5\n32 32\n255\n".to_vec();
        for y in 0..32u32 {
            for x in 0..32u32 {
                let (xf, yf, f) = (x as f64, y as f64, i as f64 + 1.0);
                let v = 0.5
                    + 0.2 * (0.3 * f * xf + 0.1 * yf).sin()
                    + 0.15 * (0.25 * yf - 0.2 * f * xf).cos()
                    + 0.05 * (((x * 7 + y * 13 + i * 5) % 11) as f64 / 11.0 - 0.5);
                bytes.push((v.clamp(0.0, 1.0) * 255.0) as u8);
            }
        }
        fs::write(dir.join(format!("img{i}.pgm")), bytes).unwrap();
    }
}

fn write_config(dir: &Path, name: &str, kind: &str, t_test: usize) -> PathBuf {
    let text = format!(
        r#"[model]
kind = "{kind}"
latent_dim = 6

[inference]
t_test = {t_test}

[train]
epochs = 2
batch_size = 20
t_train = 3
beta = 3.0

[data]
source = "patches"
dir = "images"
patch = 4
n_train = 120
n_test = 40

[run]
seed = 5
out_dir = "{name}"
"#
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn fond(args: &[&str]) -> Output {
    let out = Command::new(BIN)
        .args(args)
        .env("FOND_THREADS", "2")
        .output()
        .unwrap();
    out
}

fn ok(args: &[&str]) -> Output {
    let out = fond(args);
    assert!(
        out.status.success(),
        "fond {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_images(&dir.path().join("images"));
    dir
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_and_log_reproducibly() {
    let dir = setup();
    let cfg = write_config(dir.path(), "a", "ipvae", 5);
    ok(&["train", s(&cfg)]);
    let ck = dir.path().join("a/checkpoint.fond");
    let (header, rows) = csv_rows(&dir.path().join("a/train_log.csv"));
    assert_eq!(header, ["epoch", "step", "loss", "recon", "kl", "lr", "beta_eff", "wallclock_s"]);
    assert_eq!(rows.len(), 2);
    let first = fs::read(&ck).unwrap();
    ok(&["train", s(&cfg)]);
    assert_eq!(fs::read(&ck).unwrap(), first);
    ok(&["--seed", "6", "train", s(&cfg)]);
    assert_ne!(fs::read(&ck).unwrap(), first);
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a", "ipvae", 5);
    let out = fond(&["train", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("images"));
    assert!(!dir.path().join("a/checkpoint.fond").exists());
}

#[test]
fn config_errors_name_the_line() {
    let dir = setup();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nkind = \"ipvae\"\nlatnt_dim = 4\n[data]\nsource = \"patches\"\ndir = \"images\"\n").unwrap();
    let out = fond(&["train", s(&cfg)]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success());
    assert!(err.contains("latnt_dim") && err.contains("line 3"), "{err}");
}

#[test]
fn eval_outputs_and_round_trip() {
    let dir = setup();
    let cfg = write_config(dir.path(), "a", "ipvae", 5);
    ok(&["train", s(&cfg)]);
    let ck_path = dir.path().join("a/checkpoint.fond");

    ok(&["eval", s(&ck_path), "--t-test", "1"]);
    let (header, rows) = csv_rows(&dir.path().join("a/trace.csv"));
    assert_eq!(header, ["decode", "t", "r2", "sparsity", "grad_norm", "free_energy"]);
    assert_eq!(rows.len(), 2, "one row per decode");
    assert!(rows.iter().all(|r| r[1] == "0"));

    ok(&["eval", s(&ck_path), "--map-decode", "off"]);
    let (_, rows) = csv_rows(&dir.path().join("a/metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "sampled");

    ok(&["eval", s(&ck_path)]);
    let (header, rows) = csv_rows(&dir.path().join("a/metrics.csv"));
    assert_eq!(
        header,
        ["decode", "r2", "sparsity", "grad_norm", "per_dim_mse", "converge_t", "free_energy"]
    );
    let decodes: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(decodes, ["sampled", "map"]);
    let svg = fs::read_to_string(dir.path().join("a/dictionary.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    // the saved checkpoint evaluates exactly like the one still in memory
    let loaded = Checkpoint::load(&ck_path).unwrap();
    let test = load_test_data(&loaded).unwrap();
    let opts = EvalOptions {
        map_decode: MapDecode::Both,
        ..EvalOptions::from_config(&loaded.config)
    };
    let from_disk = evaluate(&loaded, &test.samples, &opts).unwrap();
    let copy = Checkpoint::from_bytes(&loaded.to_bytes().unwrap(), &ck_path).unwrap();
    let in_memory = evaluate(&copy, &test.samples, &opts).unwrap();
    assert_eq!(from_disk.metrics, in_memory.metrics);
    for (row, m) in rows.iter().zip(&from_disk.metrics) {
        assert_eq!(row[1].parse::<f64>().unwrap(), m.r2);
    }
}

#[test]
fn eval_rejects_mismatched_data() {
    let dir = setup();
    let cfg = write_config(dir.path(), "a", "ipvae", 5);
    ok(&["train", s(&cfg)]);
    let ck_path = dir.path().join("a/checkpoint.fond");
    let mut ck = Checkpoint::load(&ck_path).unwrap();
    if let fond::cli::DataSpec::Patches { patch, .. } = &mut ck.config.data {
        *patch = 5;
    }
    ck.save(&ck_path).unwrap();
    let out = fond(&["eval", s(&ck_path)]);
    assert!(!out.status.success());
}

#[test]
fn sweep_expands_the_grid() {
    let dir = setup();
    let cfg = write_config(dir.path(), "s", "igvae", 4);
    let out = ok(&["sweep", s(&cfg), "--t-train", "2,3", "--beta-factors", "0.5,2"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
    let (header, rows) = csv_rows(&dir.path().join("s/sweep.csv"));
    assert_eq!(
        header,
        ["model", "T_train", "beta", "r2", "sparsity", "map_r2", "distance", "converge_t"]
    );
    assert_eq!(rows.len(), 4);
    let mut cells: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap()))
        .collect();
    cells.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(cells, [(2, 1.0), (2, 4.0), (3, 1.5), (3, 6.0)]);
    let (fh, frows) = csv_rows(&dir.path().join("s/sweep_failures.csv"));
    assert_eq!(fh, ["model", "T_train", "beta", "error"]);
    assert!(frows.is_empty());
    assert!(fs::read_to_string(dir.path().join("s/sweep.svg")).unwrap().contains("optimum"));
    assert!(dir.path().join("s/sweep/T3_b2/checkpoint.fond").exists());
}

#[test]
fn contrast_single_trial_has_zero_spread() {
    let dir = setup();
    let cfg = write_config(dir.path(), "c", "ipvae", 5);
    ok(&["train", s(&cfg)]);
    let ck = dir.path().join("c/checkpoint.fond");
    ok(&["contrast", s(&ck), "--trials", "1", "--units", "3", "--contrasts", "0,0.5,1"]);
    let (header, rows) = csv_rows(&dir.path().join("c/psth.csv"));
    assert_eq!(header, ["unit", "contrast", "t_cycles", "mean", "std"]);
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() == 0.0));
    let (header, rows) = csv_rows(&dir.path().join("c/latency.csv"));
    assert_eq!(header, ["unit", "contrast", "peak_cycles", "onset_cycles"]);
    assert_eq!(rows.len(), 9);
    assert!(fs::read_to_string(dir.path().join("c/psth.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn contrast_rejects_gaussian_checkpoints() {
    let dir = setup();
    let cfg = write_config(dir.path(), "g", "igvae", 5);
    ok(&["train", s(&cfg)]);
    let out = fond(&["contrast", s(&dir.path().join("g/checkpoint.fond")), "--trials", "1"]);
    assert!(!out.status.success());
}
