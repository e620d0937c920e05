//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every unfrozen parameter. Parameters without a gradient
    /// entry are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let state = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.raw_dim()),
                v: Tensor::zeros(p.value.raw_dim()),
            });
            if let Some(g) = grads.get(name) {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape(format!(
                        "gradient of `{name}` is {:?}, parameter is {:?}",
                        g.shape(),
                        p.value.shape()
                    )));
                }
                state.m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
                state.v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            } else {
                state.m.mapv_inplace(|m| c.beta1 * m);
                state.v.mapv_inplace(|v| c.beta2 * v);
            }
            let decay = 1.0 - c.learning_rate * c.weight_decay;
            ndarray::Zip::from(&mut p.value)
                .and(&state.m)
                .and(&state.v)
                .for_each(|w, &m, &v| {
                    let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                    *w = *w * decay - c.learning_rate * update;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
        s.insert("b", ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = store();
        let before = p.clone();
        let mut opt = AdamW::new(AdamConfig::default());
        let grads = BTreeMap::from([("a".to_string(), ArrayD::zeros(IxDyn(&[3])))]);
        opt.step(&mut p, &grads).unwrap();
        let k = 1.0 - 1e-3 * 1e-6;
        for (name, param) in p.iter() {
            let old = &before.get(name).unwrap().value;
            for (x, y) in param.value.iter().zip(old) {
                assert_eq!(*x, y * k);
            }
        }

        let mut q = store();
        let mut plain = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        plain.step(&mut q, &grads).unwrap();
        assert_eq!(q, store());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store();
        let mut opt = AdamW::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let grads = BTreeMap::from([("a".to_string(), ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -5.0, 0.0]).unwrap())]);
        opt.step(&mut p, &grads).unwrap();
        let a = &p.get("a").unwrap().value;
        assert!((a[[0]] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((a[[1]] - (-2.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(a[[2]], 0.5);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut p = store();
        p.freeze_all();
        let before = p.clone();
        let mut opt = AdamW::new(AdamConfig::default());
        let grads = BTreeMap::from([("b".to_string(), ArrayD::ones(IxDyn(&[2, 2])))]);
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(p, before);
        assert!(opt.moments.is_empty());
    }

    #[test]
    fn gradient_shape_mismatch_is_rejected() {
        let mut p = store();
        let mut opt = AdamW::new(AdamConfig::default());
        let grads = BTreeMap::from([("a".to_string(), ArrayD::zeros(IxDyn(&[4])))]);
        assert!(opt.step(&mut p, &grads).is_err());
    }
}
