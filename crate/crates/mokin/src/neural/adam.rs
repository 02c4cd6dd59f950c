//! Adam with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// First/second moment estimates, serializable for training resume.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam optimizer over a fixed, ordered parameter list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState::default() }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn restore(&mut self, state: AdamState) {
        self.state = state;
    }

    /// Applies one update. `params` and `grads` must stay in the same
    /// order across calls; moment buffers are sized on first use.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                detail: format!("{} params vs {} grads", params.len(), grads.len()),
            });
        }
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.state.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.state.step += 1;
        let t = self.state.step;
        let bias1 = 1.0 - self.beta1.powi(t as i32);
        let bias2 = 1.0 - self.beta2.powi(t as i32);
        for ((param, grad), idx) in params.iter_mut().zip(grads).zip(0..) {
            if param.numel() != grad.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    detail: format!(
                        "param {idx}: {:?} vs grad {:?}",
                        param.shape, grad.shape
                    ),
                });
            }
            let m = &mut self.state.m[idx];
            let v = &mut self.state.v[idx];
            for ((p, g), (mi, vi)) in param
                .data
                .iter_mut()
                .zip(&grad.data)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {idx}")));
                }
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales the gradient set in place when its joint L2 norm exceeds
/// `max_norm`; returns the pre-clip norm. Errors on non-finite values so
/// training aborts with a diagnostic instead of poisoning parameters.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter() {
        for x in &g.data {
            sq += x * x;
        }
    }
    if !sq.is_finite() {
        return Err(Error::NonFinite("gradient global norm".into()));
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in &mut g.data {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar re-implementation used as the oracle.
    fn adam_oracle(lr: f64, grads: &[f64]) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut p, mut m, mut v) = (0.0, 0.0, 0.0);
        for (step, g) in grads.iter().enumerate() {
            let t = (step + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p
    }

    #[test]
    fn matches_scalar_oracle_over_three_steps() {
        let mut adam = Adam::new(0.05);
        let mut p = Tensor::scalar(0.0);
        let grad_seq = [1.0, -0.5, 2.0];
        for g in grad_seq {
            adam.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
        }
        let want = adam_oracle(0.05, &grad_seq);
        assert!((p.data[0] - want).abs() < 1e-15, "{} vs {want}", p.data[0]);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // Bias correction makes the first update lr * g / (|g| + eps).
        let mut adam = Adam::new(1e-3);
        let mut p = Tensor::scalar(1.0);
        adam.step(&mut [&mut p], &[Tensor::scalar(4.0)]).unwrap();
        assert!((p.data[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut adam = Adam::new(1e-3);
        let mut p = Tensor::scalar(0.0);
        let result = adam.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(result, Err(Error::NonFinite(_))));
    }

    #[test]
    fn clip_rescales_to_exact_budget() {
        // Two tensors whose joint norm is 50: rescaled to exactly 25.
        let mut grads = vec![
            Tensor::from_vec(&[2], vec![30.0, 0.0]).unwrap(),
            Tensor::from_vec(&[1], vec![40.0]).unwrap(),
        ];
        let pre = clip_global_norm(&mut grads, 25.0).unwrap();
        assert!((pre - 50.0).abs() < 1e-12);
        let sq: f64 = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum();
        assert!((sq.sqrt() - 25.0).abs() < 1e-12);
        // Direction is preserved.
        assert!((grads[0].data[0] - 15.0).abs() < 1e-12);
        assert!((grads[1].data[0] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = vec![Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap()];
        let pre = clip_global_norm(&mut grads, 25.0).unwrap();
        assert!((pre - 5.0).abs() < 1e-12);
        assert_eq!(grads[0].data, vec![3.0, 4.0]);
    }

    #[test]
    fn clip_rejects_non_finite() {
        let mut grads = vec![Tensor::from_vec(&[1], vec![f64::INFINITY]).unwrap()];
        assert!(clip_global_norm(&mut grads, 25.0).is_err());
    }
}
