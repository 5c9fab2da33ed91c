use serde::{Deserialize, Serialize};

use crate::error::{Result, TryOnError};
use crate::tensor::Latent;

/// Guidance scales and stroke settings of the consistent-inpainting stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha_mea: f64,
    pub alpha_text: f64,
    /// Fraction of the schedule the registered image is noised to.
    pub stroke_fraction: f64,
    /// Attention contrast factor on MEA layers.
    pub beta: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            alpha_mea: 15.0,
            alpha_text: 7.5,
            stroke_fraction: 0.35,
            beta: 1.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stroke_fraction > 0.0 && self.stroke_fraction <= 1.0) {
            return Err(TryOnError::argument(format!(
                "stroke fraction must lie in (0, 1], got {}",
                self.stroke_fraction
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TryOnError::argument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !self.alpha_mea.is_finite() || !self.alpha_text.is_finite() {
            return Err(TryOnError::argument("guidance scales must be finite"));
        }
        Ok(())
    }
}

/// `ε_base + α_MEA·(ε_mea − ε_base) + α_text·(ε_text − ε_base)`.
pub fn cfg_combine(eps_base: &Latent, eps_mea: &Latent, eps_text: &Latent, g: &GuidanceConfig) -> Result<Latent> {
    eps_base.ensure_same_shape(eps_mea, "cfg_combine (mea)")?;
    eps_base.ensure_same_shape(eps_text, "cfg_combine (text)")?;
    let mut out = eps_base.clone();
    for ((o, &m), &t) in out.data_mut().iter_mut().zip(eps_mea.data()).zip(eps_text.data()) {
        let b = *o;
        *o = b + g.alpha_mea * (m - b) + g.alpha_text * (t - b);
    }
    Ok(out)
}

/// First denoising step of a stroke run: `round_half_up(fraction · T)`,
/// at least 1.
pub fn stroke_start_step(stroke_fraction: f64, steps: usize) -> usize {
    let t = (stroke_fraction * steps as f64 + 0.5).floor() as usize;
    t.clamp(1, steps)
}
