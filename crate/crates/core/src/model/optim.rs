use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::ModelConfig;
use crate::error::{Error, Result};

/// Linear warm-up from 0 to `peak`, then cosine decay to `min_lr` at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        OptimizerState {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            step: 0,
        }
    }
}

impl AdamW {
    /// Clips `grads` in place, then applies one decoupled-weight-decay Adam
    /// update with learning rate `schedule.lr(state.step)`. Returns the
    /// pre-clip gradient norm.
    ///
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(
        &self,
        params: &mut Params,
        grads: &mut Params,
        state: &mut OptimizerState,
        schedule: &LrSchedule,
    ) -> Result<f64> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let norm = grads.sq_norm().sqrt();
        if let Some(clip) = self.grad_clip {
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let lr = schedule.lr(state.step);
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = state.m.tensors_mut();
        let vs = state.v.tensors_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let update = mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i];
                p.data[i] -= lr * update;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            peak: 5e-4,
            warmup_steps: 100,
            total_steps: 1000,
            min_lr: 0.0,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(100), 5e-4);
        assert!((s.lr(50) - 2.5e-4).abs() < 1e-18);
        assert!(s.lr(1000).abs() < 1e-18);
        assert!(s.lr(5000).abs() < 1e-18);
        assert!(s.lr(550) < s.lr(200));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = ModelConfig::desk(2, 4);
        let mut params = Params::init(&cfg, 1);
        let before = params.clone();
        let mut grads = Params::zeros(&cfg);
        let mut state = OptimizerState::new(&cfg);
        let sched = LrSchedule {
            peak: 1e-2,
            warmup_steps: 0,
            total_steps: 10,
            min_lr: 0.0,
        };
        AdamW::default()
            .step(&mut params, &mut grads, &mut state, &sched)
            .unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = ModelConfig::desk(2, 4);
        let mut params = Params::init(&cfg, 1);
        let mut grads = Params::zeros(&cfg);
        grads.layers[1].wk.data[3] = f64::NAN;
        let mut state = OptimizerState::new(&cfg);
        let sched = LrSchedule {
            peak: 1e-2,
            warmup_steps: 0,
            total_steps: 10,
            min_lr: 0.0,
        };
        let err = AdamW::default()
            .step(&mut params, &mut grads, &mut state, &sched)
            .unwrap_err();
        assert!(err.to_string().contains("layers.1.wk"), "{err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping_bounds_update_direction_norm() {
        let cfg = ModelConfig::desk(2, 4);
        let mut params = Params::init(&cfg, 1);
        let mut grads = Params::zeros(&cfg);
        grads.mask_emb.data.iter_mut().for_each(|v| *v = 10.0);
        let mut state = OptimizerState::new(&cfg);
        let sched = LrSchedule {
            peak: 1e-3,
            warmup_steps: 0,
            total_steps: 10,
            min_lr: 0.0,
        };
        let norm = AdamW::default()
            .step(&mut params, &mut grads, &mut state, &sched)
            .unwrap();
        assert!(norm > 1.0);
        assert!((grads.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
