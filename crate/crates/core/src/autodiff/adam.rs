use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

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
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers exist only for trainable parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                p.trainable
                    .then(|| (vec![0.0; p.value.numel()], vec![0.0; p.value.numel()]))
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, index: usize) -> bool {
        self.moments.get(index).is_some_and(Option::is_some)
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Frozen parameters are never read or written.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(id, p)| p.trainable && (p.grad.is_none() || !self.has_moments(id.index())))
        {
            return Err(Error::Contract(format!(
                "trainable parameter {:?} has no gradient or optimizer state",
                p.name
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self.moments[id.index()].as_mut().expect("checked above");
            let grad = p.grad.as_ref().expect("checked above").data();
            for (((theta, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
