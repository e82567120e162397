//! Momentum and Adam updates over [`ModelParams`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default)]
    pub clip_norm: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Momentum,
            learning_rate: 1e-3,
            momentum: default_momentum(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and beta2 must lie in [0, 1)".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer accumulators. `first` is the momentum (or Adam first moment);
/// `second` is only present for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub steps: u64,
    pub first: ModelParams,
    pub second: Option<ModelParams>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        let second = matches!(config.kind, OptimizerKind::Adam).then(|| params.zeros_like());
        Optimizer {
            config,
            steps: 0,
            first: params.zeros_like(),
            second,
        }
    }

    /// Apply one update. Parameters and accumulators are rounded to `f32`
    /// afterwards so that checkpoints reproduce them exactly.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let cfg = self.config;
        let mut clip = 1.0;
        if cfg.clip_norm > 0.0 {
            let norm = grads.squared_norm().sqrt();
            if norm > cfg.clip_norm {
                clip = cfg.clip_norm / norm;
            }
        }
        self.steps += 1;
        match cfg.kind {
            OptimizerKind::Momentum => {
                for ((p, m), g) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(self.first.tensors_mut())
                    .zip(grads.tensors())
                {
                    for ((p, m), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                        *m = cfg.momentum * *m + clip * g;
                        *p -= cfg.learning_rate * *m;
                    }
                }
            }
            OptimizerKind::Adam => {
                let second = self.second.get_or_insert_with(|| params.zeros_like());
                let t = self.steps as i32;
                let b1 = cfg.momentum;
                let b2 = cfg.beta2;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, m), v), g) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(self.first.tensors_mut())
                    .zip(second.tensors_mut())
                    .zip(grads.tensors())
                {
                    for (((p, m), v), g) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        let g = clip * g;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    }
                }
                second.round_to_f32();
            }
        }
        params.round_to_f32();
        self.first.round_to_f32();
    }
}
