//! Adam with bias correction, honoring the per-parameter freeze mask.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::param::ParamRegistry;
use crate::tensor::{Scalar, Tensor};

/// Optimizer hyperparameters. The default learning rate is the
/// post-training value; fine-tuning passes its own.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Moment estimates for the trainable subset of a registry. Built fresh at
/// every phase boundary; frozen parameters never get moment tensors.
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(reg: &ParamRegistry<T>, cfg: AdamConfig) -> Self {
        let mut moments = BTreeMap::new();
        for p in reg.iter() {
            if p.trainable {
                moments.insert(
                    p.name.clone(),
                    (
                        Tensor::zeros(p.value.shape().to_vec()),
                        Tensor::zeros(p.value.shape().to_vec()),
                    ),
                );
            }
        }
        AdamState {
            cfg,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Override the learning rate for subsequent steps (warmup schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one Adam update to every trainable parameter, then zero grads.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, reg: &mut ParamRegistry<T>) -> Result<()> {
        for p in reg.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let corr1 = T::from_f64(1.0 - self.cfg.beta1.powi(t as i32));
        let corr2 = T::from_f64(1.0 - self.cfg.beta2.powi(t as i32));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);

        for p in reg.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .get_mut(&p.name)
                .expect("moments exist for trainable parameter");
            let gd = p.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            for i in 0..pd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + one_minus_b1 * g;
                vd[i] = b2 * vd[i] + one_minus_b2 * g * g;
                let mhat = md[i] / corr1;
                let vhat = vd[i] / corr2;
                pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        reg.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lr_is_3e4() {
        assert_eq!(AdamConfig::default().lr, 3e-4);
    }

    #[test]
    fn zero_gradient_leaves_parameters_bit_identical() {
        let mut reg: ParamRegistry<f32> = ParamRegistry::new();
        reg.insert("w", Tensor::new(vec![3], vec![0.5, -1.25, 3.75]).unwrap(), true)
            .unwrap();
        let before = reg.bytes_of_prefix("");
        let mut adam = AdamState::new(&reg, AdamConfig::default());
        adam.step(&mut reg).unwrap();
        assert_eq!(before, reg.bytes_of_prefix(""));
    }

    #[test]
    fn frozen_parameter_untouched_even_with_gradient() {
        let mut reg: ParamRegistry<f32> = ParamRegistry::new();
        reg.insert("w", Tensor::full(vec![2], 1.0), false).unwrap();
        reg.get_mut("w").unwrap().grad.data_mut().fill(5.0);
        let before = reg.bytes_of_prefix("");
        let mut adam = AdamState::new(&reg, AdamConfig::default());
        adam.step(&mut reg).unwrap();
        assert_eq!(before, reg.bytes_of_prefix(""));
    }

    #[test]
    fn converges_on_1d_quadratic() {
        // minimize (x - 3)^2 from x = 0; gradient is 2(x - 3)
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.insert("x", Tensor::scalar(0.0), true).unwrap();
        let mut adam = AdamState::new(&reg, AdamConfig::with_lr(1e-1));
        for _ in 0..500 {
            let x = reg.get("x").unwrap().value.item();
            reg.get_mut("x").unwrap().grad.data_mut()[0] = 2.0 * (x - 3.0);
            adam.step(&mut reg).unwrap();
        }
        let x = reg.get("x").unwrap().value.item();
        assert!((x - 3.0).abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.insert("layer.weight", Tensor::full(vec![2], 1.0), true).unwrap();
        reg.get_mut("layer.weight").unwrap().grad.data_mut()[1] = f64::NAN;
        let mut adam = AdamState::new(&reg, AdamConfig::default());
        let err = adam.step(&mut reg).unwrap_err();
        assert!(err.to_string().contains("layer.weight"), "{err}");
    }

    #[test]
    fn grads_are_zeroed_after_step() {
        let mut reg: ParamRegistry<f64> = ParamRegistry::new();
        reg.insert("w", Tensor::full(vec![2], 1.0), true).unwrap();
        reg.get_mut("w").unwrap().grad.data_mut().fill(1.0);
        let mut adam = AdamState::new(&reg, AdamConfig::default());
        adam.step(&mut reg).unwrap();
        assert!(reg.get("w").unwrap().grad.data().iter().all(|&g| g == 0.0));
    }
}
