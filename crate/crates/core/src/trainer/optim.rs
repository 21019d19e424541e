use std::f64::consts::PI;

use super::{TrainConfig, TrainError};
use crate::nnet::{Float, ParamSet};

/// `lr_final + (lr_initial - lr_final) * (cos(pi * s / S) + 1) / 2`.
pub fn lr_at(config: &TrainConfig, step: u64) -> Result<f64, TrainError> {
    let total = config.total_steps;
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    let (hi, lo) = (config.lr_initial, config.lr_final);
    if step == 0 {
        return Ok(hi);
    }
    if step == total {
        return Ok(lo);
    }
    let ratio = step as f64 / total as f64;
    Ok(lo + (hi - lo) * 0.5 * ((PI * ratio).cos() + 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter tensor, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new<F: Float>(params: &ParamSet<F>) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update from the gradients stored in `params`:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step<F: Float>(
    params: &mut ParamSet<F>,
    state: &mut OptimState,
    lr: f64,
    hp: &AdamW,
) -> Result<(), TrainError> {
    if state.m.len() != params.len()
        || params.iter().zip(&state.m).any(|(p, m)| p.value.len() != m.len())
    {
        return Err(TrainError::Config("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.value.len() {
            let g = p.grad[i].as_f64();
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let theta = p.value[i].as_f64();
            let update = m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * theta;
            p.value[i] = F::of(theta - lr * update);
        }
    }
    Ok(())
}
