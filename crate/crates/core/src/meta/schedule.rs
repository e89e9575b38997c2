use crate::error::{Error, Result};

/// Inner-loop learning rate for a 1-based `epoch`.
///
/// Zero for the first five epochs, then a linear warmup reaching `peak` at
/// epoch `epochs - 20`, then held at `peak`:
/// `peak · (e − 5) / (epochs − 25)` for `5 < e < epochs − 20`.
pub fn ilr_schedule(epoch: usize, epochs: usize, peak: f64) -> Result<f64> {
    if epochs <= 25 {
        return Err(Error::Hyperparameter(format!(
            "the inner-rate schedule needs more than 25 epochs, got {epochs}"
        )));
    }
    if epoch == 0 || epoch > epochs {
        return Err(Error::Hyperparameter(format!("epoch {epoch} outside 1..={epochs}")));
    }
    Ok(if epoch <= 5 {
        0.0
    } else if epoch < epochs - 20 {
        peak * (epoch - 5) as f64 / (epochs - 25) as f64
    } else {
        peak
    })
}
