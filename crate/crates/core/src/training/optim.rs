//! SGD with heavy-ball momentum and coupled weight decay, plus the
//! warmup-then-cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::GradientBuffer;

/// Linear warmup from 0 to `lr_max`, then half-cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(lr_max: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::InvalidConfig(format!(
                "warmup_steps ({warmup_steps}) must be < total_steps ({total_steps})"
            )));
        }
        Ok(Self {
            lr_max,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_max * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    decay_mask: Vec<bool>,
}

impl OptimizerState {
    /// `decay_mask[i]` selects the entries that receive weight decay.
    pub fn new(decay_mask: Vec<bool>) -> Self {
        Self {
            velocity: vec![0.0; decay_mask.len()],
            decay_mask,
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// One in-place update: `g = grad + wd * p` (masked), `v = mu * v + g`,
/// `p -= lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &GradientBuffer,
    state: &mut OptimizerState,
    lr: f64,
    config: &SgdConfig,
) {
    assert_eq!(params.len(), grads.len(), "gradient shape");
    assert_eq!(params.len(), state.velocity.len(), "optimizer state shape");
    for (((p, &g), v), &decay) in params
        .iter_mut()
        .zip(grads.as_slice())
        .zip(state.velocity.iter_mut())
        .zip(&state.decay_mask)
    {
        let g = if decay { g + config.weight_decay * *p } else { g };
        *v = config.momentum * *v + g;
        *p -= lr * *v;
    }
}
