//! Adam optimizer with a stepped learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state is serialized into checkpoints so a resumed run continues
/// the exact same trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step_count: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update over the given named gradients. `lr_scale` is the schedule
    /// multiplier for the current epoch. Parameters without a gradient entry
    /// this step are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Matrix>,
        lr_scale: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let lr = self.cfg.lr * lr_scale;

        for (name, g) in grads {
            let entry = store.entry_mut(name)?;
            if !entry.trainable {
                return Err(Error::Config(format!(
                    "gradient supplied for non-trainable parameter {name}"
                )));
            }
            if !entry.value.same_shape(g) {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: value {} vs grad {}", entry.value.shape_str(), g.shape_str()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                entry.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier for `epoch`: 1.0 until the first boundary, then
/// x0.1 per boundary crossed.
pub fn lr_schedule_scale(epoch: usize, boundaries: &[usize]) -> f64 {
    let crossed = boundaries.iter().filter(|&&b| epoch >= b).count();
    0.1f64.powi(crossed as i32)
}
