use crate::error::{Error, Result};

/// Geometric decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_at_epoch(epoch: usize, epochs: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{epochs}")));
    }
    if epochs == 1 {
        return Ok(lr_start);
    }
    let frac = epoch as f64 / (epochs - 1) as f64;
    Ok(lr_start * (lr_end / lr_start).powf(frac))
}
