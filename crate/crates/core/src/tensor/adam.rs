use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learning rate used for the joint model in the reference recipe.
pub const REFERENCE_LR: f64 = 3e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: REFERENCE_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Only trainable parameters are ever written.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = |n: usize| vec![S::zero(); n];
        Self {
            config,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p.value.numel())).collect(),
            v: store.iter().map(|(_, p)| zeros(p.value.numel())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Vec<S>)]) -> Result<()> {
        for (id, g) in grads {
            if g.len() != store.get(*id).value.numel() {
                return Err(Error::shape("adam_step", store.get(*id).value.shape(), &[g.len()]));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at element {i}",
                    store.get(*id).name
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_learning_rate_is_reference_value() {
        assert_eq!(AdamConfig::default().lr, 3e-5);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap(), true);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        for _ in 0..10 {
            opt.step(&mut store, &[(a, vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(store.get(a).value.data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_with_zero_betas() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(1.0), true);
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
        };
        let mut opt = Adam::new(cfg, &store);
        opt.step(&mut store, &[(a, vec![1.0])]).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.get(a).value.item() - want).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::scalar(1.0), true);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(
            opt.step(&mut store, &[(a, vec![f32::NAN])]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(store.get(a).value.item(), 1.0);
    }

    #[test]
    fn frozen_parameter_is_never_written() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::scalar(1.0), false);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store, &[(a, vec![1.0])]).unwrap();
        assert_eq!(store.get(a).value.item(), 1.0);
    }
}
