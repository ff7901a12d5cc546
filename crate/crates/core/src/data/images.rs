//! Grayscale image directories and random patch extraction.

use crate::error::{FondError, Result};
use crate::numerics::{RngStream, Tensor};
use rand::Rng;
use std::path::Path;

const EXTENSIONS: [&str; 4] = ["png", "pgm", "pnm", "ppm"];

/// Loads every PNG/PGM image in `dir` (sorted by file name) as a `[h × w]`
/// tensor of luminance values in `[0, 1]`.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| FondError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(FondError::format(dir, "no PNG or PGM images"));
    }
    paths
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|source| FondError::Image {
                    path: p.clone(),
                    source,
                })?
                .to_luma8();
            let (w, h) = img.dimensions();
            Tensor::new(
                vec![h as usize, w as usize],
                img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
            )
        })
        .collect()
}

/// `n` square crops of side `patch`, uniform over all valid positions in all
/// images, flattened row-major into `[n × patch²]`.
pub fn extract_patches(
    images: &[Tensor],
    patch: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if patch == 0 {
        return Err(FondError::InvalidArgument("patch size must be positive".into()));
    }
    let counts: Vec<usize> = images
        .iter()
        .map(|im| {
            let (h, w) = (im.rows(), im.cols());
            if h >= patch && w >= patch {
                (h - patch + 1) * (w - patch + 1)
            } else {
                0
            }
        })
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(FondError::InvalidArgument(format!(
            "patch size {patch} exceeds every image"
        )));
    }
    let mut out = Tensor::zeros(&[n, patch * patch]);
    for s in 0..n {
        let mut pos = rng.random_range(0..total);
        let mut i = 0;
        while pos >= counts[i] {
            pos -= counts[i];
            i += 1;
        }
        let im = &images[i];
        let span = im.cols() - patch + 1;
        let (y0, x0) = (pos / span, pos % span);
        let row = out.row_mut(s);
        for y in 0..patch {
            row[y * patch..(y + 1) * patch].copy_from_slice(&im.row(y0 + y)[x0..x0 + patch]);
        }
    }
    Ok(out)
}
