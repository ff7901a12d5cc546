//! PCA/ZCA whitening restricted to the leading principal subspace.
//!
//! Patches are centred and globally standardized (unit mean pixel variance),
//! the covariance is eigendecomposed, components covering 99% of the variance
//! are kept and rescaled by `1/√(λ + 1e-4)`, and the result is rotated back
//! into pixel space so whitened patches remain images.

use crate::error::{FondError, Result};
use crate::numerics::{gemm, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

pub const WHITEN_EPS: f64 = 1e-4;
pub const RETAINED_VARIANCE: f64 = 0.99;

/// Everything needed to whiten new data identically.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningDescriptor {
    /// Per-pixel mean `[M]`.
    pub mean: Tensor,
    /// Retained eigenvectors as columns `[M × k]`.
    pub basis: Tensor,
    /// Per-component gain `[k]`, including the global standardization.
    pub scale: Tensor,
}

impl WhiteningDescriptor {
    pub fn retained(&self) -> usize {
        self.basis.cols()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates in the retained eigenbasis, `[N × k]`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let xb = x.as_batch();
        if xb.cols() != self.dim() {
            return Err(FondError::Shape(format!(
                "whitening expects {} columns, got {}",
                self.dim(),
                xb.cols()
            )));
        }
        let mut centred = xb.clone();
        let m = self.dim();
        for row in centred.data_mut().chunks_exact_mut(m) {
            for (v, mu) in row.iter_mut().zip(self.mean.data()) {
                *v -= mu;
            }
        }
        let k = self.retained();
        let mut p = Tensor::zeros(&[xb.rows(), k]);
        gemm(1.0, &centred, false, &self.basis, false, 0.0, &mut p)?;
        for row in p.data_mut().chunks_exact_mut(k.max(1)) {
            for (v, s) in row.iter_mut().zip(self.scale.data()) {
                *v *= s;
            }
        }
        Ok(p)
    }

    /// Whitens rows of `x` (`[N × M]` in, `[N × M]` out).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.project(x)?;
        let mut out = Tensor::zeros(&[p.rows(), self.dim()]);
        gemm(1.0, &p, false, &self.basis, true, 0.0, &mut out)?;
        Ok(out)
    }
}

/// Fits a whitening transform to `patches` (`[N × M]`) and applies it.
pub fn whiten(patches: &Tensor) -> Result<(Tensor, WhiteningDescriptor)> {
    let desc = fit_whitening(patches)?;
    let out = desc.apply(patches)?;
    Ok((out, desc))
}

pub fn fit_whitening(patches: &Tensor) -> Result<WhiteningDescriptor> {
    let (n, m) = (patches.rows(), patches.cols());
    if n < 2 || m == 0 {
        return Err(FondError::InvalidArgument(format!(
            "whitening needs at least two samples, got {n}×{m}"
        )));
    }
    patches.ensure_finite("patches")?;
    let mean = patches.sum_rows().scale(1.0 / n as f64);
    let mut centred = patches.clone();
    for row in centred.data_mut().chunks_exact_mut(m) {
        for (v, mu) in row.iter_mut().zip(mean.data()) {
            *v -= mu;
        }
    }
    let mut cov = Tensor::zeros(&[m, m]);
    gemm(1.0 / n as f64, &centred, true, &centred, false, 0.0, &mut cov)?;
    let pixel_var = (0..m).map(|i| cov.get(i, i)).sum::<f64>() / m as f64;
    if !(pixel_var > 0.0) {
        return Err(FondError::InvalidArgument("patches have zero variance".into()));
    }
    let gain = 1.0 / pixel_var.sqrt();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, cov.data()));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    // eigenvalues of the standardized covariance
    let lam: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0) * gain * gain).collect();
    let total: f64 = lam.iter().sum();
    let mut k = 0;
    let mut acc = 0.0;
    while k < m && acc < RETAINED_VARIANCE * total {
        acc += lam[k];
        k += 1;
    }
    if lam[k - 1] <= 1e-12 * lam[0] {
        return Err(FondError::InvalidArgument(format!(
            "covariance rank is below the {k} retained components"
        )));
    }
    let mut basis = Tensor::zeros(&[m, k]);
    for (c, &src) in order.iter().take(k).enumerate() {
        for r in 0..m {
            basis.set(r, c, eig.eigenvectors[(r, src)]);
        }
    }
    let scale = Tensor::from_vec(lam[..k].iter().map(|l| gain / (l + WHITEN_EPS).sqrt()).collect());
    Ok(WhiteningDescriptor { mean, basis, scale })
}
