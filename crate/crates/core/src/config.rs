//! Run configuration: one TOML document covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::dsp::SigmaExponent;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::models::{EmbedderConfig, EnhancerConfig};
use crate::trainer::{Setup, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// 1 divides by σ, 2 by σ².
    pub sigma_exponent: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { sigma_exponent: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    pub corpus: CorpusConfig,
    pub enhancer: EnhancerConfig,
    pub embedder: EmbedderConfig,
    pub losses: LossConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

/// Small single-machine preset shipped with the repository.
pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::validation("config", e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text)
    }

    pub fn desk() -> Self {
        Self::parse(DESK_TOML).expect("bundled desk preset is valid")
    }

    pub fn validate(&self) -> Result<()> {
        SigmaExponent::from_power(self.features.sigma_exponent)?;
        self.corpus.validate()?;
        self.enhancer.validate()?;
        self.embedder.validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        if self.trainer.segment_frames < self.embedder.receptive_field() {
            return Err(Error::validation(
                "trainer.segment_frames",
                format!(
                    "{} is shorter than the embedder receptive field ({})",
                    self.trainer.segment_frames,
                    self.embedder.receptive_field()
                ),
            ));
        }
        Ok(())
    }

    pub fn sigma(&self) -> SigmaExponent {
        SigmaExponent::from_power(self.features.sigma_exponent).unwrap_or_default()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn setup(&self) -> Setup {
        Setup {
            trainer: self.trainer.clone(),
            embedder: self.embedder.clone(),
            enhancer: self.enhancer.clone(),
            losses: self.losses.clone(),
            sigma: self.sigma(),
            seed: self.seed,
            config_hash: self.hash(),
        }
    }
}
