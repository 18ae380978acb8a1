//! SGD with classical momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One momentum step on flat buffers: `v ← momentum·v + grad; p ← p − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(format!(
            "sgd step over {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over an ordered parameter list. Velocity buffers are created
/// lazily on the first step and matched to parameters by position.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one step using each tensor's accumulated gradient, then clears
    /// the gradients. Tensors without a gradient keep their velocity decaying
    /// but contribute zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
            sgd_step(p.data_mut(), &grad, lr, self.momentum, v)?;
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let (mut p, mut v) = ([1.0], [0.0]);
        sgd_step(&mut p, &[1.0], 0.1, 0.0, &mut v).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let (mut p, mut v) = ([1.0], [0.0]);
        sgd_step(&mut p, &[1.0], 0.1, 0.9, &mut v).unwrap();
        sgd_step(&mut p, &[1.0], 0.1, 0.9, &mut v).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((p[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_recurrence() {
        // f(p) = p², grad 2p
        let (lr, mom) = (0.05, 0.9);
        let mut t = Tensor::scalar(3.0);
        let mut opt = Sgd::new(mom);
        let (mut p_ref, mut v_ref) = (3.0f64, 0.0f64);
        for _ in 0..10 {
            let g = 2.0 * t.data()[0];
            t.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut t], lr).unwrap();

            v_ref = mom * v_ref + 2.0 * p_ref;
            p_ref -= lr * v_ref;
            assert!((t.data()[0] - p_ref).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = [1.0, 2.0];
        assert!(sgd_step(&mut p, &[1.0], 0.1, 0.0, &mut [0.0, 0.0]).is_err());
    }
}
