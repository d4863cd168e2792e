//! Classifier-free colorization guidance between the color-transferred and
//! the plain noise predictions.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePrediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub guidance_scale: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 10.0,
        }
    }
}

impl GuidanceConfig {
    pub fn new(guidance_scale: f32) -> Result<Self> {
        let cfg = Self { guidance_scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// `eps_col * w + eps_plain * (1 - w)`.
pub fn guide(
    eps_col: &NoisePrediction,
    eps_plain: &NoisePrediction,
    cfg: GuidanceConfig,
) -> Result<NoisePrediction> {
    if eps_col.shape() != eps_plain.shape() {
        return Err(Error::shape("guidance", eps_col.shape(), eps_plain.shape()));
    }
    // f64 so large scales round once
    let w = cfg.guidance_scale as f64;
    let mut out = eps_col.clone();
    out.zip_mut_with(eps_plain, |c, &p| *c = (*c as f64 * w + p as f64 * (1.0 - w)) as f32);
    Ok(out)
}
