use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// Each step first shrinks every parameter by `1 - lr·wd`, then applies the
/// bias-corrected Adam update computed from the gradient alone.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.numel()])
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// One update of every gradient-carrying parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer built for another store"
        );
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(c.lr);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        for (idx, tensor) in params.iter_mut() {
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[idx.0], &mut self.v[idx.0]);
            for (((p, &g), mi), vi) in data
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *p *= decay;
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
