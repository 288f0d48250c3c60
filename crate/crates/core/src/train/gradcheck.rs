//! Central finite-difference check of the hand-written backward pass.

use rand::Rng;

use super::{batch_loss_and_grad, Example};
use crate::codec::LabelMode;
use crate::error::{Error, Result};
use crate::rng;
use crate::scorer::ScorerModel;

/// Relative errors below this denominator are measured against the floor
/// instead, so parameters with (near) zero gradient do not blow up the ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Parameter indices that were checked.
    pub indices: Vec<usize>,
    /// `(eps, max relative error)` for every step size tried.
    pub sweep: Vec<(f64, f64)>,
}

impl GradCheckReport {
    pub fn best(&self) -> (f64, f64) {
        self.sweep
            .iter()
            .copied()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("sweep is never empty")
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Picks up to `max_params` indices spread over every parameter block.
pub fn sample_indices(model: &ScorerModel, max_params: usize, seed: u64) -> Vec<usize> {
    let blocks = model.blocks();
    let per_block = max_params.div_ceil(blocks.len().max(1)).max(1);
    let mut r = rng::stream(seed, "gradcheck");
    let mut out = Vec::new();
    for b in blocks {
        for _ in 0..per_block.min(b.len()) {
            if out.len() == max_params {
                break;
            }
            out.push(b.offset + r.random_range(0..b.len()));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Checks the model's own analytic gradient on `batch`.
pub fn gradient_check(
    model: &ScorerModel,
    batch: &[Example],
    mode: LabelMode,
    max_params: usize,
    eps_sweep: &[f64],
    seed: u64,
) -> Result<GradCheckReport> {
    let mut grads = vec![0.0; model.param_count()];
    batch_loss_and_grad(model, batch, mode, None, Some(&mut grads))?;
    gradient_check_against(model, batch, mode, &grads, max_params, eps_sweep, seed)
}

/// Compares the supplied `analytic` gradient against finite differences.
pub fn gradient_check_against(
    model: &ScorerModel,
    batch: &[Example],
    mode: LabelMode,
    analytic: &[f64],
    max_params: usize,
    eps_sweep: &[f64],
    seed: u64,
) -> Result<GradCheckReport> {
    if eps_sweep.is_empty() || analytic.len() != model.param_count() {
        return Err(Error::invalid(
            "need a non-empty eps sweep and a full-length gradient",
        ));
    }
    let indices = sample_indices(model, max_params, seed);
    let mut probe = model.clone();
    let mut sweep = Vec::with_capacity(eps_sweep.len());
    for &eps in eps_sweep {
        let mut worst: f64 = 0.0;
        for &i in &indices {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let plus = batch_loss_and_grad(&probe, batch, mode, None, None)?;
            probe.params_mut()[i] = orig - eps;
            let minus = batch_loss_and_grad(&probe, batch, mode, None, None)?;
            probe.params_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * eps)));
        }
        sweep.push((eps, worst));
    }
    Ok(GradCheckReport { indices, sweep })
}
