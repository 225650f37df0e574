//! Exponential moving average of one parameter set toward another; drives
//! both the momentum encoder (stage 1) and the teacher (stage 2).

use super::model::ModelState;
use crate::error::{Error, Result};

/// `slow <- alpha * slow + (1 - alpha) * fast`, elementwise over every
/// parameter of `slow`. `fast` must carry a shape-congruent tensor for
/// each of them.
pub fn ema_update(slow: &mut ModelState, fast: &ModelState, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("alpha must be in [0,1], got {alpha}")));
    }
    // Validate everything before mutating anything.
    for (name, tensor) in slow.iter() {
        let f = fast.get(name)?;
        if f.shape != tensor.shape {
            return Err(Error::dimension(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                tensor.shape, f.shape
            )));
        }
    }
    let names: Vec<String> = slow.names().cloned().collect();
    for name in names {
        let f = fast.get(&name)?.data.clone();
        let t = slow.get_mut(&name)?;
        for (s, fv) in t.data.iter_mut().zip(&f) {
            *s = alpha * *s + (1.0 - alpha) * fv;
        }
    }
    Ok(())
}
