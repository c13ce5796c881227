//! AdamW with decoupled weight decay and optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::model::EncoderWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamwConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Scale gradients so their global L2 norm is at most this; `None`
    /// disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Optimizer state: first/second moment buffers mirroring the parameter
/// shapes, plus the step counter for bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: AdamwConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: AdamwConfig, weights: &EncoderWeights) -> Self {
        let m = weights.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = weights.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Optimizer { cfg, step: 0, m, v }
    }

    pub fn config(&self) -> &AdamwConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated in `weights`,
    /// consuming them. A non-finite gradient aborts before any parameter
    /// moves. The decay term is decoupled:
    /// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
    pub fn step(&mut self, weights: &mut EncoderWeights) -> Result<(), TrainError> {
        for (name, p) in weights.names().iter().zip(weights.params()) {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient { name: name.clone() });
            }
        }
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let sq: f64 = weights.params().iter().flat_map(|p| &p.grad).map(|g| g * g).sum();
                let norm = sq.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (idx, p) in weights.params_mut().iter_mut().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (e, theta) in p.value.values_mut().iter_mut().enumerate() {
                let g = p.grad[e] * scale;
                m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * g;
                v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * g * g;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                *theta -= c.lr * (m_hat / (v_hat.sqrt() + c.eps)) + c.lr * c.weight_decay * *theta;
            }
            p.zero_grad();
        }
        Ok(())
    }
}
