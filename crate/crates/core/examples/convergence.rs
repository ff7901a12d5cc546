//! Detecting when an inference trace has settled: least-squares slopes over
//! a sliding window, and the first run of flat windows.
//!
//! cargo run --release --example convergence

use fond::analysis::{convergence_index, detect_convergence};

fn main() -> fond::Result<()> {
    let n = 1000;
    let traces: Vec<(&str, Vec<f64>)> = vec![
        ("constant", vec![0.8; n]),
        ("steady ramp", (0..n).map(|t| 1e-3 * t as f64).collect()),
        ("ramp, flat from t=200", (0..n).map(|t| 0.01 * t.min(200) as f64).collect()),
        ("exponential approach", (0..n).map(|t| 0.9 * (1.0 - (-(t as f64) / 40.0).exp())).collect()),
        (
            "damped oscillation",
            (0..n)
                .map(|t| 0.7 + 0.2 * (-(t as f64) / 80.0).exp() * (t as f64 / 6.0).cos())
                .collect(),
        ),
    ];
    println!("{:<24} {:>12} {:>14}", "trace", "converged at", "(3 windows)");
    for (name, tr) in &traces {
        let k = convergence_index(tr)?;
        let loose = detect_convergence(tr, 60, 1e-5, 3)?;
        let shown = if k == tr.len() { "never".to_string() } else { k.to_string() };
        println!("{name:<24} {shown:>12} {loose:>14}");
    }
    Ok(())
}
