//! Adam optimizer over named parameter arrays.

use super::model::ModelState;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators, keyed like the parameters they track.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update over every parameter that has a gradient entry.
/// A non-finite gradient aborts with the offending parameter named.
pub fn adam_step(
    params: &mut ModelState,
    grads: &BTreeMap<String, Vec<f64>>,
    opt: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    opt.t += 1;
    let bc1 = 1.0 - BETA1.powi(opt.t as i32);
    let bc2 = 1.0 - BETA2.powi(opt.t as i32);
    for (name, g) in grads {
        let tensor = params.get_mut(name)?;
        if tensor.data.len() != g.len() {
            return Err(Error::dimension(format!(
                "gradient length {} does not match parameter {name} ({})",
                g.len(),
                tensor.data.len()
            )));
        }
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
