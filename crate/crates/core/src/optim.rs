//! Adaptive-moment first-order optimizer.

use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter slot of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments, indexed like the parameter store; `None`
    /// for buffers and parameters that never received a gradient.
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: usize) -> Self {
        Self {
            config,
            step: 0,
            moments: (0..params).map(|_| None).collect(),
        }
    }

    /// Applies one update with learning rate `lr`. A zero learning rate
    /// leaves every parameter bit-identical.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step_size = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.config.eps);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(*id).data_mut();
            for (((p, &gi), m), v) in p
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1t * *m + one_b1 * gi;
                *v = b2t * *v + one_b2 * gi * gi;
                if lr != 0.0 {
                    *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
                }
            }
        }
    }
}
