//! Adam with bias correction, global-norm gradient clipping, and an
//! exponential learning-rate schedule. The scheduled rate is computed as
//! `base * gamma^epoch` directly (not by repeated multiplication), so it
//! matches the closed form to the last unit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained a non-finite value; parameters untouched.
    SkippedNonFinite,
}

/// Per-parameter first/second moments plus schedule state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub base_lr: f64,
    pub gamma: f64,
    pub epoch: u32,
    pub step_count: u64,
    pub skipped: u64,
    slots: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(base_lr: f64, gamma: f64) -> Result<Self> {
        if base_lr <= 0.0 || gamma <= 0.0 {
            return Err(Error::invalid("learning rate and gamma must be positive"));
        }
        Ok(AdamState {
            base_lr,
            gamma,
            epoch: 0,
            step_count: 0,
            skipped: 0,
            slots: BTreeMap::new(),
        })
    }

    /// Current scheduled learning rate, `base * gamma^epoch`.
    pub fn lr(&self) -> f64 {
        self.base_lr * self.gamma.powi(self.epoch as i32)
    }

    /// Advance the epoch boundary; returns the new rate.
    pub fn schedule_epoch(&mut self) -> f64 {
        self.epoch += 1;
        self.lr()
    }

    /// One bias-corrected update. Gradients are clipped jointly to the given
    /// global norm before the moment updates; a non-finite gradient skips the
    /// whole step and bumps the skip counter.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        clip_norm: Option<f64>,
    ) -> Result<StepOutcome> {
        let mut sq_norm = 0.0;
        for (name, g) in grads {
            if !g.all_finite() {
                self.skipped += 1;
                return Ok(StepOutcome::SkippedNonFinite);
            }
            if params.get(name)?.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    name,
                    g.shape(),
                    params.get(name)?.shape()
                )));
            }
            sq_norm += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let scale = match clip_norm {
            Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
            _ => 1.0,
        };

        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.lr();
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);

        for (name, g) in grads {
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = params
                .tensors_mut()
                .get_mut(name)
                .expect("validated above");
            for i in 0..g.len() {
                let gi = g.data()[i] * scale;
                let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
