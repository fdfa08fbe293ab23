//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Updates every trainable parameter from its accumulated gradient, then
    /// clears the gradients. Fails before touching anything if a trainable
    /// parameter has no gradient.
    pub fn step<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.role == Role::Trainable && p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for p in store.iter_mut().filter(|p| p.role == Role::Trainable) {
            let grad = p.grad.take().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
            for i in 0..value.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
