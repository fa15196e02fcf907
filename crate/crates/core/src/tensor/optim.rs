use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Steps over which the learning rate ramps linearly from 0 to `lr`.
    pub warmup_steps: usize,
}

impl AdamConfig {
    pub fn new(lr: f32, warmup_steps: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
        }
    }
}

/// Adam with a linear warm-up. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: usize,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Effective learning rate at a 0-based step index.
    pub fn lr_at(&self, step: usize) -> f32 {
        let warm = self.config.warmup_steps;
        if warm == 0 || step >= warm {
            self.config.lr
        } else {
            self.config.lr * step as f32 / warm as f32
        }
    }

    /// Applies one update to every `(name, param, grad)` triple.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor<f32>, &'a Tensor<f32>)>,
    ) -> Result<()> {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(Error::NonFiniteGradient((*name).to_string()));
            }
        }

        let lr = self.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, param, grad) in updates {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
