//! Named starting configurations.

use clap::ValueEnum;
use pii_core::InversionConfig;

/// Side length the bundled classifiers are trained at.
pub const DESK_RESOLUTION: usize = 32;

/// Baseline weights pinned for the toy CNN.
pub const DEEPDREAM_TV: f64 = 1e-4;
pub const DEEPDREAM_L2: f64 = 1e-5;
pub const DEEPINVERSION_FEATURE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Staged zoom and centering with a ColorShift ensemble, no image priors.
    #[default]
    Pii,
    /// Total variation and l2 priors, no ColorShift.
    Deepdream,
    /// DeepDream plus BatchNorm feature matching.
    Deepinversion,
}

impl Preset {
    pub fn config(self) -> InversionConfig {
        let mut cfg = InversionConfig {
            resolution: DESK_RESOLUTION,
            ..Default::default()
        };
        if self != Preset::Pii {
            cfg.augmentation.alpha = 0.0;
            cfg.augmentation.beta = 0.0;
            cfg.augmentation.ensemble_size = 1;
            cfg.weights.tv = DEEPDREAM_TV;
            cfg.weights.l2 = DEEPDREAM_L2;
        }
        if self == Preset::Deepinversion {
            cfg.weights.feature = DEEPINVERSION_FEATURE;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_distinct() {
        for p in [Preset::Pii, Preset::Deepdream, Preset::Deepinversion] {
            pii_core::config::validate_config(p.config()).unwrap();
        }
        let pii = Preset::Pii.config();
        assert!(pii.weights.is_zero());
        assert!(pii.augmentation.color_shift_enabled());
        assert!(!Preset::Deepdream.config().augmentation.color_shift_enabled());
        assert!(Preset::Deepinversion.config().weights.feature > 0.0);
    }
}
