//! Linear warmup to the base learning rate, then linear decay to zero.

use super::TrainError;

/// Learning rate at `step` of `total_steps`.
///
/// With `W = round(warmup_ratio · total_steps)`: ramps as
/// `base_lr·step/W` for `step < W`, then decays as
/// `base_lr·(total_steps−step)/(total_steps−W)`. Hits `base_lr` exactly at
/// `step == W`.
pub fn lr_at_step(
    step: u64,
    total_steps: u64,
    base_lr: f64,
    warmup_ratio: f64,
) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::ZeroTotalSteps);
    }
    if step > total_steps {
        return Err(TrainError::StepOutOfRange { step, total: total_steps });
    }
    let warmup = (warmup_ratio * total_steps as f64).round() as u64;
    if step < warmup {
        Ok(base_lr * step as f64 / warmup as f64)
    } else if total_steps == warmup {
        // only reachable at step == total_steps == W
        Ok(base_lr)
    } else {
        Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}
