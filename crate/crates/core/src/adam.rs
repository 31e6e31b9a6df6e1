//! Adam with bias correction.

use crate::params::{GradientStore, ParamSet};
use crate::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update and zeroes `grads`. A non-finite gradient aborts
    /// the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut GradientStore) -> Result<(), Error> {
        assert!(grads.is_congruent(params), "gradient store shape mismatch");
        assert_eq!(self.m.len(), params.len(), "adam state shape mismatch");
        for (id, a) in params.iter() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(a.name().to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= learning_rate * mh / (vh.sqrt() + epsilon);
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFiniteParameter(name.to_string()));
        }
        grads.zero();
        Ok(())
    }
}
