//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state; moments are stored under `m.<name>` / `v.<name>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: ParamStore::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// With a zero learning rate the parameters are left untouched (the
    /// moments still advance).
    pub fn update(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let m_key = format!("m.{name}");
            let v_key = format!("v.{name}");
            if !self.moments.contains(&m_key) {
                self.moments.insert(m_key.clone(), Tensor::zeros(g.rows(), g.cols()));
                self.moments.insert(v_key.clone(), Tensor::zeros(g.rows(), g.cols()));
            }
            {
                let m = self.moments.get_mut(&m_key).expect("moment exists");
                for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                    *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                }
            }
            {
                let v = self.moments.get_mut(&v_key).expect("moment exists");
                for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                    *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                }
            }
            if c.learning_rate == 0.0 {
                continue;
            }
            let m = self.moments.expect(&m_key);
            let v = self.moments.expect(&v_key);
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= c.learning_rate * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *pv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::full(2, 3, 0.25));
        let before = params.clone();
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.0,
            ..Default::default()
        });
        opt.update(&mut params, &[("w".into(), Tensor::full(2, 3, 5.0))]);
        assert_eq!(params, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..2000 {
            let g = params.expect("x").scale(2.0);
            opt.update(&mut params, &[("x".into(), g)]);
        }
        assert!(params.expect("x").data().iter().all(|v| v.abs() < 1e-2));
    }
}
