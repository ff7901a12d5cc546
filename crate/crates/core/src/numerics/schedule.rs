//! Learning-rate, KL-weight and temperature schedules.

use crate::error::{FondError, Result};
use std::f64::consts::PI;

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`, no restarts.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(FondError::InvalidArgument(
            "cosine schedule needs total > 0".into(),
        ));
    }
    let frac = step.min(total) as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos()))
}

/// Linear KL warm-up: 0 at epoch 0, 1 once `warm_frac` of training has passed.
pub fn kl_anneal(epoch: f64, total_epochs: f64, warm_frac: f64) -> f64 {
    let warm = warm_frac * total_epochs;
    if warm <= 0.0 {
        return 1.0;
    }
    (epoch / warm).clamp(0.0, 1.0)
}

/// Geometric temperature decay from `t_start` to `t_stop` over the first half
/// of training, constant afterwards.
pub fn temp_anneal(epoch: f64, total_epochs: f64, t_start: f64, t_stop: f64) -> f64 {
    let half = 0.5 * total_epochs;
    if half <= 0.0 || epoch >= half {
        return t_stop;
    }
    let frac = (epoch / half).max(0.0);
    t_start * (t_stop / t_start).powf(frac)
}
