use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// 1-based decoder layers whose tokens feed global fusion and the heads.
    pub taps: [usize; 4],
    pub mlp_ratio: usize,
    /// Feature width inside the prediction heads.
    pub head_width: usize,
    pub match_dim: usize,
    /// Base channel count of the refinement U-Net.
    pub refine_width: usize,
    pub refine_heads: usize,
    pub views: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            encoder_depth: 6,
            decoder_depth: 12,
            taps: [3, 6, 9, 12],
            mlp_ratio: 2,
            head_width: 32,
            match_dim: 16,
            refine_width: 16,
            refine_heads: 2,
            views: 4,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image size {} is not a multiple of patch {}", self.image_size, self.patch));
        }
        if self.grid() % 4 != 0 {
            return bad(format!("token grid {} must be a multiple of 4", self.grid()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) || self.taps[0] == 0 || self.taps[3] > self.decoder_depth {
            return bad(format!(
                "taps {:?} must be increasing layers within 1..={}",
                self.taps, self.decoder_depth
            ));
        }
        if self.head_width < 2 || self.head_width % 2 != 0 {
            return bad(format!("head width {} must be even", self.head_width));
        }
        if self.refine_width == 0 || self.refine_heads == 0 || (2 * self.refine_width) % self.refine_heads != 0 {
            return bad("refine width must be divisible by its heads".into());
        }
        if self.image_size % 8 != 0 {
            return bad("image size must be a multiple of 8 for the refinement U-Net".into());
        }
        if self.views == 0 || self.views % 2 != 0 {
            return Err(Error::OddViewCount(self.views));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning-rate restart period in epochs.
    pub restart_epochs: f64,
    /// Optimizer steps per scene per epoch.
    pub repeats: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Learning-rate multiplier of stage-1 weights during stage 2.
    pub backbone_lr_scale: f64,
    pub chamfer_points: usize,
    pub match_pairs: usize,
    pub match_tau: f64,
    pub match_weight: f64,
    /// Views rendered for supervision in stage 2, counting the inputs.
    pub supervision_views: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            restart_epochs: 20.0,
            repeats: 1,
            stage1_epochs: 100,
            stage2_epochs: 100,
            backbone_lr_scale: 0.1,
            chamfer_points: 10_000,
            match_pairs: 128,
            match_tau: 0.1,
            match_weight: 0.1,
            supervision_views: 8,
            seed: 0,
        }
    }
}

/// Everything a training run is configured by; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text)?;
        c.model.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.model.validate().unwrap();
        assert_eq!(c.model.taps, [3, 6, 9, 12]);
        assert_eq!(c.loss.depth_l1, 20.0);
        assert_eq!(Config::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = Config::from_toml("[model]\ndim = 32\nheads = 2\n").unwrap();
        assert_eq!(partial.model.dim, 32);
        assert_eq!(partial.train.lr, 4e-4);
    }

    #[test]
    fn invalid_configs() {
        let mut m = ModelConfig::default();
        m.taps = [3, 6, 9, 13];
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.dim = 30;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.views = 3;
        assert!(matches!(m.validate(), Err(Error::OddViewCount(3))));
        assert!(Config::from_toml("[model]\nunknown = 1\n").is_err());
    }
}
