use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Number of warmup steps: `ceil(warmup_ratio * total_steps)`.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps)
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let warm = warmup_steps(total_steps, warmup_ratio);
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}
