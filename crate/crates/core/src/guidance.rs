//! Guidance combinators for noise predictions.
//!
//! Standard classifier-free guidance mixes a conditional and an unconditional
//! prediction; the fine-grained variant substitutes the superclass-conditional
//! prediction for the unconditional one, so the guidance direction points from
//! the superclass distribution toward the subclass within it. Both are the
//! same affine combination `base + ω·(cond − base)` and share one kernel, so
//! they agree bitwise when handed the same inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How to combine noise predictions during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Pure conditional sampling, no combination.
    None,
    /// Classifier-free guidance against the null label.
    Cfg,
    /// Fine-grained guidance against the parent superclass.
    FineGrained,
}

/// Guidance mode plus scale ω.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub omega: f64,
}

impl GuidanceConfig {
    pub fn new(mode: GuidanceMode, omega: f64) -> Result<Self> {
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(Error::invalid(format!("guidance scale must be finite and >= 0, got {omega}")));
        }
        Ok(Self { mode, omega })
    }

    pub fn none() -> Self {
        Self { mode: GuidanceMode::None, omega: 1.0 }
    }

    /// Re-check the invariants from [`GuidanceConfig::new`]. Useful for
    /// configs built by deserialization, which bypasses the constructor.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.mode, self.omega).map(|_| ())
    }
}

/// `base + ω·(cond − base)`, elementwise.
///
/// Two reductions hold bitwise, not just to rounding: ω = 1 returns `cond`
/// verbatim, and coordinates where `cond` and `base` are equal pass through
/// unchanged.
fn guide_affine(cond: &[f64], base: &[f64], omega: f64) -> Result<Vec<f64>> {
    if cond.len() != base.len() {
        return Err(Error::invalid(format!(
            "guidance operands differ in dimension: {} vs {}",
            cond.len(),
            base.len()
        )));
    }
    if omega == 1.0 {
        return Ok(cond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(base)
        .map(|(&c, &b)| {
            let d = c - b;
            if d == 0.0 {
                c
            } else {
                b + omega * d
            }
        })
        .collect())
}

/// Classifier-free guidance: `eps_null + ω·(eps_cond − eps_null)`.
pub fn guide_eps_cfg(eps_cond: &[f64], eps_null: &[f64], omega: f64) -> Result<Vec<f64>> {
    guide_affine(eps_cond, eps_null, omega)
}

/// Fine-grained guidance: `eps_super + ω·(eps_sub − eps_super)`.
pub fn guide_eps_fine(eps_sub: &[f64], eps_super: &[f64], omega: f64) -> Result<Vec<f64>> {
    guide_affine(eps_sub, eps_super, omega)
}
