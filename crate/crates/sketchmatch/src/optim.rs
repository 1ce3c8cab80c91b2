//! Gradient-descent optimizers over parameter sets.
//!
//! Both optimizers update trainable tensors in place from their accumulated
//! gradients, leave frozen tensors untouched and clear gradients afterwards.
//! A trainable tensor without a gradient is a training-state error: it means
//! the caller never ran a backward pass that reached it.

use crate::error::{Error, Result};
use crate::params::ParamSet;

use std::collections::HashMap;

/// Storage precision for training runs.
///
/// Arithmetic always runs at f64. Under `F32`, updated weights are rounded
/// through f32 after each step and archives are written with f32 payloads, so
/// a run behaves as if weights were stored single-precision. Gradient checks
/// require `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Plain stochastic gradient descent: `w -= lr * grad`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub precision: Precision,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr, precision: Precision::F64 }
    }

    pub fn step(&self, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for name in &names {
            let t = params.get_mut(name)?;
            if !t.requires_grad() {
                continue;
            }
            let grad = t
                .grad()
                .ok_or_else(|| {
                    Error::TrainingState(format!("trainable tensor `{name}` has no gradient"))
                })?
                .to_vec();
            for (w, g) in t.data_mut().iter_mut().zip(&grad) {
                *w -= self.lr * g;
                if self.precision == Precision::F32 {
                    *w = *w as f32 as f64;
                }
            }
            t.clear_grad();
        }
        Ok(())
    }
}

/// Adam with bias correction. Defaults: beta1=0.9, beta2=0.999, eps=1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub precision: Precision,
    step_count: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F64,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let names: Vec<String> = params.names().to_vec();
        for name in &names {
            let tensor = params.get_mut(name)?;
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor
                .grad()
                .ok_or_else(|| {
                    Error::TrainingState(format!("trainable tensor `{name}` has no gradient"))
                })?
                .to_vec();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::TrainingState(format!(
                    "optimizer state for `{name}` has stale size {}",
                    m.len()
                )));
            }
            for (i, (w, g)) in tensor.data_mut().iter_mut().zip(&grad).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                if self.precision == Precision::F32 {
                    *w = *w as f32 as f64;
                }
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}

/// Either optimizer, selected by run configuration.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params),
            Optimizer::Adam(o) => o.step(params),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd(o) => o.lr,
            Optimizer::Adam(o) => o.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p.get_mut("w").unwrap().accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn sgd_scalar_step() {
        // w=1, grad=2, lr=0.1 -> w=0.8
        let mut p = param(1.0, 2.0);
        Sgd::new(0.1).step(&mut p).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn frozen_tensor_untouched() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        p.insert("frozen", Tensor::scalar(5.0)).unwrap();
        p.get_mut("frozen").unwrap().set_requires_grad(false);
        p.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
        Sgd::new(0.5).step(&mut p).unwrap();
        assert_eq!(p.get("frozen").unwrap().data()[0], 5.0);
        assert!((p.get("w").unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_training_state_error() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        let err = Sgd::new(0.1).step(&mut p).unwrap_err();
        assert!(matches!(err, Error::TrainingState(_)));
    }

    #[test]
    fn adam_first_step_matches_hand_iterate() {
        // First Adam update with defaults: m = 0.1 g, v = 0.001 g^2,
        // mhat = g, vhat = g^2, delta = -lr * g / (|g| + eps).
        let g = 3.0f64;
        let lr = 0.01;
        let mut p = param(2.0, g);
        let mut adam = Adam::new(lr);
        adam.step(&mut p).unwrap();
        let expected = 2.0 - lr * g / (g.abs() + 1e-8);
        assert!(
            (p.get("w").unwrap().data()[0] - expected).abs() < 1e-12,
            "got {} expected {expected}",
            p.get("w").unwrap().data()[0]
        );
        // Sign-scaled: magnitude close to lr regardless of |g|.
        let delta: f64 = 2.0 - p.get("w").unwrap().data()[0];
        assert!((delta - lr).abs() < 1e-8);
    }

    #[test]
    fn f32_precision_rounds_through_storage() {
        let mut p = param(1.0, 0.1234567890123);
        let mut sgd = Sgd::new(1.0);
        sgd.precision = Precision::F32;
        sgd.step(&mut p).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert_eq!(w, w as f32 as f64);
    }
}
