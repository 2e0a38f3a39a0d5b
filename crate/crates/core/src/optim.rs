//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::autograd::Gradients;
use crate::nn::ParamStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    first: Vec<Vec<Matrix>>,
    second: Vec<Vec<Matrix>>,
}

impl AdamW {
    pub fn new(stores: &[&ParamStore], lr: f64, weight_decay: f64) -> Self {
        let zeros = |s: &&ParamStore| s.values().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect::<Vec<_>>();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: stores.iter().map(zeros).collect(),
            second: stores.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Groups listed in `frozen` and parameters without a
    /// gradient are left untouched, including their weight decay.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients, frozen: &[usize]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (g, store) in stores.iter_mut().enumerate() {
            if frozen.contains(&g) {
                continue;
            }
            for (i, param) in store.values_mut().iter_mut().enumerate() {
                let Some(grad) = &grads.group(g)[i] else { continue };
                let m = &mut self.first[g][i];
                let v = &mut self.second[g][i];
                let pd = param.data_mut();
                for (((pv, gv), mv), vv) in pd.iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *pv -= self.lr * self.weight_decay * *pv;
                    *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
