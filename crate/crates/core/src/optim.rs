//! Optimizers over a [`ParamStore`]: Adam for the teacher, momentum SGD for
//! the student. State tensors are exposed by name so checkpoints can resume
//! runs bit-exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.arrays().iter().map(|a| Array2::zeros(a.raw_dim())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} grads for {} params",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, p) in store.arrays_mut().iter_mut().enumerate() {
            let g = if self.cfg.weight_decay > 0.0 {
                &grads[i] + &(&*p * self.cfg.weight_decay)
            } else {
                grads[i].clone()
            };
            self.m[i] = &self.m[i] * self.cfg.beta1 + &(&g * (1.0 - self.cfg.beta1));
            self.v[i] = &self.v[i] * self.cfg.beta2 + &(&g * &g * (1.0 - self.cfg.beta2));
            let mhat = &self.m[i] / b1t;
            let vhat = &self.v[i] / b2t;
            let update = mhat / (vhat.mapv(f64::sqrt) + self.cfg.eps);
            *p -= &(update * self.cfg.lr);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub cfg: SgdConfig,
    pub vel: Vec<Array2<f64>>,
    pub t: u64,
}

impl SgdMomentum {
    pub fn new(cfg: SgdConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            vel: store.arrays().iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} grads for {} params",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        for (i, p) in store.arrays_mut().iter_mut().enumerate() {
            let g = if self.cfg.weight_decay > 0.0 {
                &grads[i] + &(&*p * self.cfg.weight_decay)
            } else {
                grads[i].clone()
            };
            self.vel[i] = &self.vel[i] * self.cfg.momentum + &g;
            *p -= &(&self.vel[i] * self.cfg.lr);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store(x0: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Array2::from_elem((1, 1), x0));
        s
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = quadratic_store(2.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..400 {
            let x = store.get(crate::nn::ParamId(0))[[0, 0]];
            let g = vec![Array2::from_elem((1, 1), 2.0 * x)];
            opt.step(&mut store, &g).unwrap();
        }
        assert!(store.get(crate::nn::ParamId(0))[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut store = quadratic_store(2.0);
        let mut opt = SgdMomentum::new(
            SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            &store,
        );
        for _ in 0..200 {
            let x = store.get(crate::nn::ParamId(0))[[0, 0]];
            let g = vec![Array2::from_elem((1, 1), 2.0 * x)];
            opt.step(&mut store, &g).unwrap();
        }
        assert!(store.get(crate::nn::ParamId(0))[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn grad_count_mismatch_rejected() {
        let mut store = quadratic_store(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        assert!(opt.step(&mut store, &[]).is_err());
    }
}
