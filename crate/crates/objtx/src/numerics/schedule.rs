//! Linear warmup / linear decay learning-rate schedule.

use crate::error::{Error, Result};

/// Learning rate at `step` (0-based, `step <= total_steps`): linear ramp
/// from 0 to `base_lr` over the first `warmup_frac` of training, then linear
/// decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_frac: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if !(0.0..=1.0).contains(&warmup_frac) {
        return Err(Error::Config(format!(
            "warmup_frac {warmup_frac} not in [0, 1]"
        )));
    }
    if !(base_lr.is_finite() && base_lr >= 0.0) {
        return Err(Error::Config(format!("base_lr {base_lr} invalid")));
    }
    if step > total_steps {
        return Err(Error::Usage(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let total = total_steps as f64;
    let warm = warmup_frac * total;
    let s = step as f64;
    let lr = if s < warm {
        base_lr * s / warm
    } else if warm >= total {
        base_lr
    } else {
        base_lr * (total - s) / (total - warm)
    };
    Ok(lr)
}
