use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, MlpNetwork};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment accumulators for one network.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    first: Gradients<T>,
    second: Gradients<T>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &MlpNetwork<T>, config: AdamConfig) -> Self {
        Self {
            config,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one AdamW update. Non-finite gradients reject the step and
    /// leave both the network and the state untouched.
    pub fn step(&mut self, net: &mut MlpNetwork<T>, grads: &Gradients<T>) -> Result<()> {
        if !grads.congruent_with(net) || !self.first.congruent_with(net) {
            return Err(Error::InvalidArgument(
                "gradient or optimizer state shape does not match the network".into(),
            ));
        }
        if let Some((layer, index)) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                context: "gradient",
                layer,
                index,
            });
        }
        self.step += 1;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.epsilon);
        let wd = T::from_f64_lossy(c.weight_decay);
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let one = T::one();

        let params = net.params_mut();
        let moments = self.first.iter_mut().zip(self.second.iter_mut());
        for ((p, &g), (m, v)) in params.zip(grads.iter()).zip(moments) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
        Ok(())
    }
}
