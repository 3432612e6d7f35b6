use serde::{Deserialize, Serialize};

use super::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies step `t` (1-based) to every trainable parameter using the
    /// gradients accumulated in the store.
    pub fn step(&self, store: &mut ParamStore, t: u64) {
        for p in store.iter_mut().filter(|p| !p.frozen) {
            adam_update(
                p.value.data_mut(),
                p.grad.data(),
                &mut p.moment1,
                &mut p.moment2,
                self,
                t,
            );
        }
    }
}

pub fn adam_update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &Adam,
    t: u64,
) {
    let t = t.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        value[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}
