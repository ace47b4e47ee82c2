//! Constant-then-linear learning-rate decay.

use crate::error::{CoreError, Result};

/// Learning rate at `step` of a `total`-step run.
///
/// Constant at `lr0` for the first `constant_fraction * total` steps, then
/// linear down to exactly zero at `step == total`.
pub fn lr_schedule(step: u64, total: u64, lr0: f64, constant_fraction: f64) -> Result<f64> {
    if step > total {
        return Err(CoreError::OutOfRange { name: "step", value: step as f64 });
    }
    if !(0.0..=1.0).contains(&constant_fraction) {
        return Err(CoreError::OutOfRange { name: "lr_constant_fraction", value: constant_fraction });
    }
    let knee = constant_fraction * total as f64;
    let s = step as f64;
    if step == total {
        return Ok(0.0);
    }
    if s < knee {
        return Ok(lr0);
    }
    Ok(lr0 * (total as f64 - s) / (total as f64 - knee))
}
