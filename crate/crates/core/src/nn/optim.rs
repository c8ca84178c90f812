use serde::{Deserialize, Serialize};

use super::graph::ComputeGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            epochs: 10,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

/// SGD or Adam (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) over any number of
/// parameter slots. Moment buffers are allocated on first use of a slot.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.optimizer, cfg.learning_rate)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Starts a new step; Adam bias correction uses the step count.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, value: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in value.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() <= slot {
                    self.m.resize(slot + 1, Vec::new());
                    self.v.resize(slot + 1, Vec::new());
                }
                if self.m[slot].len() != value.len() {
                    self.m[slot] = vec![0.0; value.len()];
                    self.v[slot] = vec![0.0; value.len()];
                }
                let t = self.t.max(1) as i32;
                let c1 = 1.0 - Self::BETA1.powi(t);
                let c2 = 1.0 - Self::BETA2.powi(t);
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..value.len() {
                    let g = grad[i];
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    value[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Applies one optimizer step to every parameter of the graph.
pub fn optimizer_step(graph: &mut ComputeGraph, opt: &mut Optimizer) {
    opt.begin_step();
    for (slot, p) in graph.params_mut().iter_mut().enumerate() {
        let grad = p.grad.data().to_vec();
        opt.update(slot, p.value.data_mut(), &grad);
    }
}
