use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsProp {
    pub rho: Float,
    pub eps: Float,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp { rho: 0.9, eps: 1e-8 }
    }
}

/// One RMSProp update of a parameter array and its squared-gradient average:
/// `v ← ρ·v + (1−ρ)·g²`, `p ← p − lr·g / (√v + ε)`.
///
/// Nothing is modified when any gradient is non-finite.
pub fn rmsprop_step(
    params: &mut [Float],
    grads: &[Float],
    v: &mut [Float],
    lr: Float,
    opt: &RmsProp,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != v.len() {
        return Err(Error::shape(
            "rmsprop",
            format!("{} params, {} grads, {} state", params.len(), grads.len(), v.len()),
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("element {i} is {}", grads[i])));
    }
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(v.iter_mut()) {
        *s = opt.rho * *s + (1.0 - opt.rho) * g * g;
        *p -= lr * g / (s.sqrt() + opt.eps);
    }
    Ok(())
}
