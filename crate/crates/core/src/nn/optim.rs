use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math::sqrt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0, 0.0, 0)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, dim: usize) -> Self {
        Self::new(OptimizerKind::Adam, lr, beta1, beta2, dim)
    }

    pub fn new(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, dim: usize) -> Self {
        let dim = if kind == OptimizerKind::Adam { dim } else { 0 };
        Self { kind, lr, beta1, beta2, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
                let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
                let step = self.lr / bc1;
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    params[i] -= step * self.m[i] / (sqrt(self.v[i] / bc2) + self.eps);
                }
            }
        }
    }
}
