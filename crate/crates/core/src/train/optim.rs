use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay Adam step:
    /// `p ← p·(1 − lr·wd)`, then the bias-corrected moment update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_effective: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                expected: format!("{} values", self.m.len()),
                got: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let decay = 1.0 - lr_effective * weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *p *= decay;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr_effective * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// `base_lr · (1 − step/total_steps)^power`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(domain("poly schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(domain(format!("step {step} is past the schedule end {total_steps}")));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}
