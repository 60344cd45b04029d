//! Momentum SGD with a polynomial ("poly") learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{GradientVector, ParameterVector};

pub const POLY_POWER: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `base_lr · (1 − t/T)^0.9`.
pub fn poly_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    base_lr * (1.0 - step as f64 / total_steps as f64).powf(POLY_POWER)
}

/// How the step size evolves over a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Poly,
    /// Fixed rate, independent of the step counter.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    momentum_buffer: Vec<f64>,
    step: usize,
    total_steps: usize,
    config: SgdConfig,
    schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new(params: &ParameterVector, total_steps: usize, config: SgdConfig) -> Self {
        Self::with_schedule(params, total_steps, config, LrSchedule::Poly)
    }

    pub fn with_schedule(
        params: &ParameterVector,
        total_steps: usize,
        config: SgdConfig,
        schedule: LrSchedule,
    ) -> Self {
        Self {
            momentum_buffer: vec![0.0; params.len()],
            step: 0,
            total_steps,
            config,
            schedule,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum_buffer
    }

    /// Learning rate the next call to [`sgd_step`] will use.
    pub fn current_lr(&self, base_lr: f64) -> f64 {
        match self.schedule {
            LrSchedule::Poly => poly_lr(base_lr, self.step, self.total_steps),
            LrSchedule::Constant(lr) => lr,
        }
    }
}

/// One momentum-SGD update in place:
///
/// ```text
/// g ← ∇ + wd·θ
/// v ← μ·v + g
/// θ ← θ − lr(t)·v
/// ```
///
/// Returns the learning rate that was applied.
pub fn sgd_step(
    params: &mut ParameterVector,
    grad: &GradientVector,
    state: &mut OptimizerState,
    base_lr: f64,
) -> Result<f64> {
    if state.step >= state.total_steps {
        return Err(Error::Training(format!(
            "optimizer step {} is past the planned {} steps",
            state.step, state.total_steps
        )));
    }
    if params.len() != grad.len() || params.len() != state.momentum_buffer.len() {
        return Err(Error::Shape(format!(
            "params {}, gradient {}, momentum {}",
            params.len(),
            grad.len(),
            state.momentum_buffer.len()
        )));
    }
    let lr = state.current_lr(base_lr);
    let SgdConfig {
        momentum,
        weight_decay,
    } = state.config;
    for ((theta, g), v) in params
        .values_mut()
        .iter_mut()
        .zip(grad.values())
        .zip(state.momentum_buffer.iter_mut())
    {
        let d = g + weight_decay * *theta;
        *v = momentum * *v + d;
        *theta -= lr * *v;
    }
    state.step += 1;
    Ok(lr)
}
