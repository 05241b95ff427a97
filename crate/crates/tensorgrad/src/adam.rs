use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for every store entry (buffers included, so indices line up with the store).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub hyper: AdamHyper,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamHyper) -> Self {
        let zeros: Vec<Vec<T>> = store.entries().iter().map(|e| vec![T::zero(); e.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            hyper,
        }
    }

    /// One bias-corrected Adam update of every trainable entry.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.grads.len() != store.len() || self.m.len() != store.len() {
            return Err(GradError::Contract(format!(
                "adam: {} grads / {} moments for {} parameters",
                grads.grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let n = store.get(id).numel();
            if grads.grads[id.0].len() != n || self.m[id.0].len() != n {
                return Err(GradError::shape(
                    "adam_step",
                    format!("{n} values for {}", store.entry(id).name),
                    &[grads.grads[id.0].len()],
                ));
            }
        }
        self.step += 1;
        let h = self.hyper;
        let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
        let (lr, eps) = (T::of(h.lr), T::of(h.eps));
        let c1 = T::one() - b1.powi(self.step as i32);
        let c2 = T::one() - b2.powi(self.step as i32);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let g = &grads.grads[id.0];
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] = p[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
