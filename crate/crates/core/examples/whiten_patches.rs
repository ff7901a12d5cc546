//! The patch pipeline: load grayscale photographs, cut random 16×16 patches,
//! whiten them, and write the result as an IDX file.
//!
//! cargo run --release --example whiten_patches -- --out runs/patches.idx

use std::path::PathBuf;

use clap::Parser;
use fond::data::{extract_patches, load_image_dir, whiten, write_idx, IdxArray};
use fond::numerics::{gemm, RngStream, Tensor};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "data/natural")]
    images: PathBuf,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn covariance_summary(x: &Tensor) -> fond::Result<(f64, f64)> {
    let (n, m) = (x.rows(), x.cols());
    let mean = x.sum_rows().scale(1.0 / n as f64);
    let mut c = x.clone();
    for row in c.data_mut().chunks_exact_mut(m) {
        for (v, mu) in row.iter_mut().zip(mean.data()) {
            *v -= mu;
        }
    }
    let mut cov = Tensor::zeros(&[m, m]);
    gemm(1.0 / n as f64, &c, true, &c, false, 0.0, &mut cov)?;
    let diag = (0..m).map(|i| cov.get(i, i)).sum::<f64>() / m as f64;
    let off = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| cov.get(i, j).abs())
        .sum::<f64>()
        / (m * (m - 1)) as f64;
    Ok((diag, off))
}

fn main() -> fond::Result<()> {
    let a = Args::parse();
    let images = load_image_dir(&a.images)?;
    println!("{} images from {}", images.len(), a.images.display());
    let raw = extract_patches(&images, a.patch, a.n, &mut RngStream::new(0, 0))?;
    let (white, desc) = whiten(&raw)?;
    let (d0, o0) = covariance_summary(&raw)?;
    let (d1, o1) = covariance_summary(&white)?;
    println!("kept {} of {} components", desc.retained(), desc.dim());
    println!("raw:      mean variance {d0:.4}, mean |covariance| {o0:.4}");
    println!("whitened: mean variance {d1:.4}, mean |covariance| {o1:.4}");
    if let Some(out) = a.out {
        // rescale to bytes for a compact preview file
        let lo = white.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = white.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let data = white.data().iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect();
        write_idx(&out, &IdxArray { dims: vec![a.n, a.patch, a.patch], data })?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
