use serde::{Deserialize, Serialize};

use super::params::{GradStore, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.1,
            max_grad_norm: 0.2,
        }
    }
}

/// Moment estimates for AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub clipped_norm: f64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<_> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        OptimizerState {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clips `grads` to `max_grad_norm`, then applies one bias-corrected Adam
    /// update with decoupled weight decay. A non-finite gradient aborts the
    /// step and leaves both `params` and `self` untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &GradStore<f32>,
    ) -> Result<StepStats> {
        if !grads.is_congruent(params) || self.m.len() != params.len() {
            return Err(Error::Input(
                "gradient/optimizer shapes do not match parameters".into(),
            ));
        }
        if !grads.all_finite() {
            return Err(Error::numeric("adam_step", "non-finite gradient"));
        }
        let mut g = grads.clone();
        let grad_norm = g.clip_global_norm(self.config.max_grad_norm);
        let clipped_norm = g.global_norm();

        let c = &self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let lr = c.learning_rate;
        let decay = (c.learning_rate * c.weight_decay) as f32;
        for i in 0..params.len() {
            let gi = g.grad(i).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * gi[j];
                v[j] = b2 * v[j] + (1.0 - b2) * gi[j] * gi[j];
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let update = lr * mhat / (vhat.sqrt() + c.eps);
                p[j] = p[j] - decay * p[j] - update as f32;
            }
        }
        self.step += 1;
        Ok(StepStats {
            grad_norm,
            clipped_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f32) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.push("x", Tensor::vector(vec![x]));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_param(1.5);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, &p);
        let g = GradStore::zeros_like(&p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.flat(0), 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1e9,
        };
        let mut opt = OptimizerState::new(cfg, &p);
        let mut g = GradStore::zeros_like(&p);
        g.grad_mut(0).data_mut()[0] = 1.0;
        opt.step(&mut p, &g).unwrap();
        assert!((p.flat(0) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_precedes_update() {
        let mut p = ParamStore::new();
        p.push("x", Tensor::vector(vec![0.0f32; 2]));
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        let mut g = GradStore::zeros_like(&p);
        g.grad_mut(0).data_mut().copy_from_slice(&[6.0, 8.0]);
        let stats = opt.step(&mut p, &g).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-6);
        assert!((stats.clipped_norm - 0.2).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_leaves_state_unchanged() {
        let mut p = scalar_param(2.0);
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        let before = (p.clone(), opt.clone());
        let mut g = GradStore::zeros_like(&p);
        g.grad_mut(0).data_mut()[0] = f32::NAN;
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Numeric { .. })));
        assert_eq!(p, before.0);
        assert_eq!(opt, before.1);
    }
}
