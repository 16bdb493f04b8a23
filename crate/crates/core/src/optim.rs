//! SGD with classical momentum and a stepwise exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Constraint;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub period_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.045,
            decay: 0.94,
            period_epochs: 2,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.initial.is_nan() || self.initial <= 0.0 {
            return Err(Error::config(format!("initial lr {} must be > 0", self.initial)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("lr decay {} outside (0, 1]", self.decay)));
        }
        if self.period_epochs == 0 {
            return Err(Error::config("lr period must be ≥ 1 epoch"));
        }
        Ok(())
    }

    /// `initial · decay^⌊epoch / period⌋`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.period_epochs) as i32;
        self.initial * self.decay.powi(steps)
    }
}

/// A trainable tensor together with its projection rule.
pub struct ParamMut<'a, T> {
    pub value: &'a mut Tensor<T>,
    pub constraint: Constraint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub current_lr: f64,
}

impl<T: Scalar> SgdState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, momentum: f64, lr: f64) -> Self {
        SgdState {
            velocity: params.into_iter().map(Tensor::zeros_like).collect(),
            momentum,
            current_lr: lr,
        }
    }
}

/// `v ← μ v − η g; w ← w + v`, then project constrained parameters.
pub fn sgd_step<T: Scalar>(
    params: &mut [ParamMut<'_, T>],
    grads: &[&Tensor<T>],
    state: &mut SgdState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::contract(format!(
            "sgd_step: {} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let mu = T::of(state.momentum);
    let lr = T::of(state.current_lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.value.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::contract(format!(
                "sgd_step: parameter {} vs gradient {}",
                p.value.shape(),
                g.shape()
            )));
        }
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi - lr * gi;
            *w += *vi;
        }
        p.constraint.project(p.value);
        if !p.value.is_finite() {
            return Err(Error::Numeric("parameter became non-finite in sgd_step".into()));
        }
    }
    Ok(())
}
