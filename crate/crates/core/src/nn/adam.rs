//! Adam with bias correction, preceded by global l2 gradient-norm clipping.

use super::graph::NnError;
use super::tensor::Tensor;

pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale factor that brings the global norm down to `max_norm` (1.0 when the
/// norm is already inside the bound).
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>], max_grad_norm: f64) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One update over the full parameter list. Gradients are clipped by
    /// global norm before the moment updates. Returns the pre-clip norm.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<f64, NnError> {
        assert_eq!(params.len(), grads.len(), "param/grad list length");
        assert_eq!(params.len(), self.m.len(), "optimizer state length");
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(NnError::NonFiniteGrad(format!("tensor {i}")));
            }
        }
        let norm = global_grad_norm(grads);
        let scale = clip_scale(norm, self.max_grad_norm);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.data.len() {
                let gj = g.data[j] * scale;
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
