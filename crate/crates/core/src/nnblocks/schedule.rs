use crate::error::{Error, Result};

/// Final-epoch learning rate as a fraction of the initial one.
pub const DEFAULT_FINAL_FRACTION: f64 = 0.12;

/// Cosine decay from `lr0` at epoch 0 to `final_fraction * lr0` at the last epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64, final_fraction: f64) -> Result<f64> {
    if total_epochs < 2 {
        return Err(Error::invalid(format!(
            "cosine schedule needs at least 2 epochs, got {total_epochs}"
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    if !lr0.is_finite() || !final_fraction.is_finite() {
        return Err(Error::NonFinite("learning-rate inputs".into()));
    }
    let t = epoch as f64 / (total_epochs - 1) as f64;
    let f = final_fraction;
    Ok(lr0 * (f + (1.0 - f) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0))
}
