use std::f64::consts::PI;

use crate::datamodel::{DecayMode, TrainConfig};
use crate::error::{Error, Result};

/// Learning rate of `epoch` under the configured schedule.
///
/// With [`DecayMode::CosineFloor`] the rate follows half a cosine from
/// `initial_lr` at epoch 0 to `initial_lr * lr_decay` at the last epoch.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let epochs = config.epochs;
    if epoch >= epochs {
        return Err(Error::EpochOutOfRange { epoch, epochs });
    }
    let lr0 = config.initial_lr;
    Ok(match config.decay_mode {
        DecayMode::CosineFloor => {
            if epochs == 1 {
                return Ok(lr0);
            }
            let lr_min = lr0 * config.lr_decay;
            let t = epoch as f64 / (epochs - 1) as f64;
            lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos())
        }
        DecayMode::Step => lr0 * config.lr_decay.powi((4 * epoch / epochs) as i32),
    })
}

/// The whole schedule, one rate per epoch.
pub fn lr_trace(config: &TrainConfig) -> Result<Vec<f64>> {
    (0..config.epochs).map(|e| cosine_lr(e, config)).collect()
}
