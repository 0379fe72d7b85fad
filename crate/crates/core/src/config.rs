//! Run configuration: one TOML section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::UnetConfig;
use crate::diffusion::DiffusionConfig;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::injection::InjectionConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisionBackend {
    Surrogate,
    /// Hugging Face CLIP vision weights (`model.safetensors`).
    Clip { weights: PathBuf, config: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub vision: VisionBackend,
    /// Seed for every surrogate's frozen weights.
    pub backbone_seed: u64,
    /// Side of rendered reference images in pixels.
    pub render_size: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { vision: VisionBackend::Surrogate, backbone_seed: 7, render_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub encoder: EncoderSpec,
    pub injection: InjectionConfig,
    pub diffusion: DiffusionConfig,
    pub trainer: TrainerConfig,
    pub unet: UnetConfig,
    pub eval: EvalConfig,
    pub backends: BackendConfig,
}

impl AppConfig {
    /// Settings for the surrogate stack: ten-step schedule, a learning rate
    /// and batch that overfit a handful of images in seconds, and no guidance
    /// extrapolation.
    pub fn surrogate() -> Self {
        let mut cfg = Self { diffusion: DiffusionConfig::surrogate(), ..Self::default() };
        cfg.diffusion.guidance = 1.0;
        cfg.trainer.lr = 1e-2;
        cfg.trainer.batch_size = 8;
        cfg.trainer.steps = 2000;
        cfg.trainer.checkpoint_every = 500;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.injection.validate()?;
        if self.diffusion.steps == 0 {
            return Err(Error::Config("diffusion.steps must be positive".into()));
        }
        if self.encoder.width % self.unet.latent_patch != 0 || self.encoder.height % self.unet.latent_patch != 0 {
            return Err(Error::Config("encoder image size must be divisible by unet.latent_patch".into()));
        }
        if self.backends.render_size % self.encoder.width != 0 || self.encoder.width != self.encoder.height {
            return Err(Error::Config("render_size must be a multiple of a square encoder input".into()));
        }
        if !(self.eval.fid_jitter >= 0.0) {
            return Err(Error::Config("eval.fid_jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_sections() {
        let cfg = AppConfig::surrogate();
        assert_eq!(AppConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = AppConfig::from_toml("seed = 3\n[trainer]\nlr = 0.01\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.trainer.lr, 0.01);
        assert_eq!(partial.encoder, EncoderSpec::default());
        assert!(AppConfig::from_toml("[encoder]\nk = 9\n").is_err());
        assert!(AppConfig::from_toml("[trainer]\nbogus = 1\n").is_err());
    }
}
