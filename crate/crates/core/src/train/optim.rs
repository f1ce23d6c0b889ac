//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| {
                    let [r, c] = store.get(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Decay is applied only to tensors the
    /// store marks for it.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = &grads[i];
            if grad.shape() != store.get(id).shape() {
                return Err(Error::contract(format!("gradient shape mismatch for {}", store.name(id))));
            }
            let decay = if store.decays(id) { weight_decay } else { 0.0 };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                let g = grad.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                w[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * w[k]);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(2.0), true);
        s.add("ln.gain", Tensor::filled(1, 3, 1.0), false);
        s
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s);
        let grads = vec![Tensor::zeros(1, 1), Tensor::zeros(1, 3)];
        for _ in 0..5 {
            opt.update(&mut s, &grads, 0.1, 0.0).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let mut opt = AdamW::new(&s);
        let grads = vec![Tensor::scalar(1.0), Tensor::zeros(1, 3)];
        opt.update(&mut s, &grads, 0.1, 0.0).unwrap();
        // m_hat = 1, v_hat = 1, step = lr / (1 + eps).
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get(s.find("w").unwrap()).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_undecayed_tensors() {
        let mut s = store();
        let mut opt = AdamW::new(&s);
        let grads = vec![Tensor::zeros(1, 1), Tensor::zeros(1, 3)];
        opt.update(&mut s, &grads, 0.1, 0.5).unwrap();
        assert_eq!(s.get(s.find("ln.gain").unwrap()).data(), &[1.0, 1.0, 1.0]);
        assert!((s.get(s.find("w").unwrap()).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::row_vector(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::row_vector(vec![0.3, 0.4])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }
}
