use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Parameter(format!("invalid Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            step_count: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
        }
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    grad.expect_shape(param.shape(), "adam grad")?;
    state.first_moment.expect_shape(param.shape(), "adam first moment")?;
    state.second_moment.expect_shape(param.shape(), "adam second moment")?;

    state.step_count += 1;
    let t = state.step_count.min(i32::MAX as u64) as i32;
    let correction1 = (1.0 - (cfg.beta1 as f64).powi(t)) as f32;
    let correction2 = (1.0 - (cfg.beta2 as f64).powi(t)) as f32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);

    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
