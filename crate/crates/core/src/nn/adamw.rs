//! AdamW: Adam with decoupled weight decay.
//!
//! ```text
//! w <- w * (1 - lr * wd)
//! m <- b1 * m + (1 - b1) * g
//! v <- b2 * v + (1 - b2) * g^2
//! w <- w - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Result, Tensor, TensorError};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clipping; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: None }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<F: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(store: &ParamStore<F>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape()).expect("shape")).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds state from saved moments; shapes must match the store.
    pub fn restore(store: &ParamStore<F>, config: AdamWConfig, step: u64, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(TensorError::InvalidArgument { op: "AdamW::restore", reason: "moment count mismatch".into() });
        }
        for ((id, mt), vt) in store.ids().zip(&m).zip(&v) {
            let s = store.get(id).shape();
            if mt.shape() != s || vt.shape() != s {
                return Err(TensorError::ShapeMismatch { op: "AdamW::restore", lhs: s.to_vec(), rhs: mt.shape().to_vec() });
            }
        }
        Ok(Self { config, step, m, v })
    }

    /// One update with learning rate `lr`. `grads` is indexed like the store;
    /// every parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(TensorError::InvalidArgument {
                op: "AdamW::step",
                reason: format!("{} gradients for {} parameters", grads.len(), store.len()),
            });
        }
        for (id, gr) in store.ids().zip(grads) {
            match gr {
                None => {
                    return Err(TensorError::InvalidArgument {
                        op: "AdamW::step",
                        reason: format!("missing gradient for {}", store.name(id)),
                    })
                }
                Some(t) if t.shape() != store.get(id).shape() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "AdamW::step",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        let clip_scale = match self.config.grad_clip {
            Some(max_norm) => {
                let sq: f64 = grads.iter().flatten().flat_map(|t| t.data().iter()).map(|v| v.as_f64().powi(2)).sum();
                let norm = sq.sqrt();
                if norm > max_norm { max_norm / (norm + 1e-12) } else { 1.0 }
            }
            None => 1.0,
        };

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let decay = F::from_f64(1.0 - lr * c.weight_decay);
        let step_size = F::from_f64(lr / bc1);
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(c.eps);
        let clip = F::from_f64(clip_scale);

        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].as_ref().expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                w[j] = w[j] * decay - step_size * m[j] / ((v[j]).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
