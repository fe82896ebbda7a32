//! Training configuration, read from TOML `key = value` files.
//!
//! Top-level keys configure training; model keys live under `[model]`,
//! optimizer keys under `[optimizer]` and augmentation under
//! `[augmentation]`. Unknown keys are rejected.
//!
//! ```toml
//! epochs = 200
//! seed = 7
//! loss = "vanilla_cd"
//!
//! [model]
//! branches = 3
//! fusion_mode = "double"
//! level_points = [128, 64, 32]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::ModelConfig;
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size >= 0.0
            && self.step_size.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Random rigid rotation about the vertical axis and Gaussian jitter
/// applied to training inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentation {
    /// Largest rotation angle in radians; the angle is uniform in
    /// `[-rotation, rotation]` and applied to both partial and target.
    pub rotation: f64,
    /// Standard deviation of the noise added to the partial input.
    pub noise_sigma: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            rotation: 0.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub augmentation: Option<Augmentation>,
    /// Also save a checkpoint every this many epochs; 0 saves only at the
    /// end.
    pub checkpoint_every: usize,
    pub precision: Precision,
    /// Which part of the dataset to train on.
    pub split: Split,
    /// Dataset directory or manifest.
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 200,
            batch_size: 1,
            seed: 0,
            loss: LossKind::VanillaCd,
            augmentation: None,
            checkpoint_every: 0,
            precision: Precision::Narrow,
            split: Split::Train,
            data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if let Some(a) = &self.augmentation {
            if !(a.rotation >= 0.0 && a.rotation.is_finite() && a.noise_sigma >= 0.0 && a.noise_sigma.is_finite()) {
                return Err(Error::config("augmentation ranges must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Read a config file. Relative `data` paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(d), Some(dir)) = (&cfg.data, path.parent()) {
            if d.is_relative() {
                cfg.data = Some(dir.join(d));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderKind;
    use crate::fusion::FusionMode;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn keys_override_defaults() {
        let cfg = TrainConfig::from_toml(
            r#"
            epochs = 3
            seed = 9
            loss = "external:mine"
            precision = "wide"
            split = "all"

            [model]
            branches = 2
            fusion_mode = "single"
            decoder = "transformer_upsampling"
            level_points = [64, 32, 16]

            [optimizer]
            step_size = 0.01

            [augmentation]
            noise_sigma = 0.01
            "#,
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model.branches, 2);
        assert_eq!(cfg.model.fusion_mode, FusionMode::Single);
        assert_eq!(cfg.model.decoder, DecoderKind::TransformerUpsampling);
        assert_eq!(cfg.model.level_points, [64, 32, 16]);
        assert_eq!(cfg.model.level_widths, ModelConfig::default().level_widths);
        assert_eq!(cfg.optimizer.step_size, 0.01);
        assert_eq!(cfg.optimizer.beta2, 0.999);
        assert_eq!(cfg.augmentation.unwrap().noise_sigma, 0.01);
        assert_eq!(cfg.precision, Precision::Wide);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "epochs = 0",
            "bogus = 1",
            "[model]\nbranches = 5",
            "[model]\nheads = 3",
            "loss = \"l2\"",
            "[optimizer]\nbeta1 = 1.5",
            "epochs = \"many\"",
        ] {
            let e = TrainConfig::from_toml(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }
}
