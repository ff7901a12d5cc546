//! Adamax (the infinity-norm variant of Adam).

use super::tensor::Tensor;
use crate::error::{FondError, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
const DIV_GUARD: f64 = 1e-12;

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerState {
    pub fn new(shape: &[usize], beta1: f64, beta2: f64) -> Self {
        OptimizerState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            beta1,
            beta2,
        }
    }

    pub fn for_param(param: &Tensor) -> Self {
        Self::new(param.shape(), DEFAULT_BETA1, DEFAULT_BETA2)
    }
}

/// One Adamax update of `param` in place.
///
/// `m ← β1·m + (1−β1)·g`, `v ← max(β2·v, |g|)`,
/// `param ← param − lr/(1−β1^t) · m/v`.
pub fn adamax_step(
    state: &mut OptimizerState,
    param: &mut Tensor,
    grad: &Tensor,
    lr: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(FondError::Shape(format!(
            "adamax: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !(lr > 0.0) {
        return Err(FondError::InvalidArgument(format!("learning rate {lr}")));
    }
    grad.ensure_finite("adamax gradient")?;
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let step = lr / (1.0 - b1.powi(state.t.min(i32::MAX as u64) as i32));
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = (b2 * *vi).max(g.abs());
        *p -= step * *mi / (*vi + DIV_GUARD);
    }
    Ok(())
}

/// Adamax over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adamax {
    states: Vec<OptimizerState>,
}

impl Adamax {
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64) -> Self {
        Adamax {
            states: params
                .iter()
                .map(|p| OptimizerState::new(p.shape(), beta1, beta2))
                .collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(FondError::Shape("adamax: parameter list changed".into()));
        }
        for ((s, p), g) in self.states.iter_mut().zip(params).zip(grads) {
            adamax_step(s, p, g, lr)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut s = OptimizerState::for_param(&p);
        for _ in 0..3 {
            adamax_step(&mut s, &mut p, &Tensor::zeros(&[3]), 0.002).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::from_vec(vec![0.5]);
        let mut s = OptimizerState::for_param(&p);
        adamax_step(&mut s, &mut p, &Tensor::from_vec(vec![1.0]), 0.002).unwrap();
        assert!((p.data()[0] - (0.5 - 0.002)).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonfinite_gradient() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut s = OptimizerState::for_param(&p);
        let g = Tensor::from_vec(vec![f64::NAN]);
        assert!(matches!(
            adamax_step(&mut s, &mut p, &g, 0.1),
            Err(FondError::NonFinite(_))
        ));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Tensor::from_vec(vec![0.0, 1.0]);
        let mut s = OptimizerState::for_param(&p);
        assert!(adamax_step(&mut s, &mut p, &Tensor::zeros(&[3]), 0.1).is_err());
    }
}
