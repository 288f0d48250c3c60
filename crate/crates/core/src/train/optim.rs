//! AdamW with decoupled weight decay, applied the way `torch.optim.AdamW`
//! does it: the parameter is first shrunk by `lr * weight_decay`, then the
//! bias-corrected Adam update is subtracted.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// A contiguous run of trainable parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRange {
    pub range: Range<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_srcc: Option<f64>,
    pub val_plcc: Option<f64>,
    pub val_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of optimizer updates applied so far.
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr: 0.0,
            history: Vec::new(),
        }
    }
}

/// One AdamW update of the parameters inside `ranges` at learning rate `lr`.
/// Parameters outside the ranges are left untouched.
pub fn adam_step(
    state: &mut TrainState,
    params: &mut [f64],
    grads: &[f64],
    ranges: &[ParamRange],
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "gradient and moment shapes must match the parameters",
        ));
    }
    if let Some(i) = ranges
        .iter()
        .flat_map(|r| r.range.clone())
        .find(|&i| !grads[i].is_finite())
    {
        return Err(Error::TrainingDiverged {
            step: state.step,
            detail: format!("non-finite gradient at parameter {i}"),
        });
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for r in ranges {
        let decay = if r.decay {
            1.0 - lr * hp.weight_decay
        } else {
            1.0
        };
        for i in r.range.clone() {
            let g = grads[i];
            let m = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
            let v = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
            state.m[i] = m;
            state.v[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
