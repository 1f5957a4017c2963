//! Gamma-correction preprocessing of the input images and its exact inverse.
//! Brightening the inputs once at load time keeps the density control from
//! pruning the cloud to nothing on very dark scenes; the inverse map recovers
//! the original exposure from raw renders.

use serde::{Deserialize, Serialize};

use crate::img::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Gain A.
    pub a: f64,
    /// Exponent; < 1 brightens.
    pub gamma: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            gamma: 1.0 / 2.2,
        }
    }
}

/// Per-channel A·v^gamma, clamped to [0,1].
pub fn gamma_correct(image: &Image, cfg: &PreprocessConfig) -> Image {
    image.map(|v| (cfg.a * v.powf(cfg.gamma)).clamp(0.0, 1.0))
}

/// Exact inverse of `gamma_correct` on values the clamp did not touch.
pub fn inverse_gamma(image: &Image, cfg: &PreprocessConfig) -> Image {
    image.map(|v| ((v / cfg.a).powf(1.0 / cfg.gamma)).clamp(0.0, 1.0))
}
