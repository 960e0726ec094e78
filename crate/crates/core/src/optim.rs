//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::DiscriminatorParams;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("parameter {0} has mismatched gradient shape")]
    Shape(&'static str),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
}

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2` with
/// `lr_min = floor * lr0`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, floor: f64) -> Result<f64, OptimError> {
    if total_steps == 0 {
        return Err(OptimError::EmptySchedule);
    }
    if step > total_steps {
        return Err(OptimError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let lr_min = floor * lr0;
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a flat tensor. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let b1 = T::c(cfg.beta1);
    let b2 = T::c(cfg.beta2);
    let one = T::one();
    let bc1 = T::c(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::c(1.0 - cfg.beta2.powi(t as i32));
    let lr_t = T::c(lr);
    let eps = T::c(cfg.eps);
    let shrink = T::c(1.0 - lr * cfg.weight_decay);
    for i in 0..param.len() {
        let g = grad[i];
        if decay {
            param[i] *= shrink;
        }
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First/second moments for every model tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: DiscriminatorParams<T>,
    pub v: DiscriminatorParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &DiscriminatorParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Applies one AdamW step to all tensors. Weight decay skips the tensors
/// flagged as non-decaying (layer norm, positional embeddings). Nothing is
/// modified if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut DiscriminatorParams<T>,
    grads: &DiscriminatorParams<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    for ((name, p, _), (_, g, _)) in params.tensors().into_iter().zip(grads.tensors()) {
        if p.len() != g.len() {
            return Err(OptimError::Shape(name));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step;
    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((_, p, decay), (_, g, _)), (_, m, _)), (_, v, _)) in
        params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
    {
        adamw_update(p, g, m, v, lr, t, cfg, decay);
    }
    Ok(())
}
