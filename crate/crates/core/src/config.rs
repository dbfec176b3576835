use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::FrontendConfig;
use crate::fpindex::IndexConfig;
use crate::musdet::GateConfig;
use crate::nnfp::EmbedderTopology;
use crate::seqmatch::MatcherConfig;

/// Environment variable that overrides [`PipelineConfig::seed`].
pub const SEED_ENV: &str = "TUNEWAKE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSection {
    /// Fingerprint dimension: 64, 96 or 128.
    pub dim: usize,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self { dim: 96 }
    }
}

/// Every tunable of the recognizer, stored as TOML. Missing keys take their
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub gate: GateConfig,
    pub embedder: EmbedderSection,
    pub index: IndexConfig,
    pub matcher: MatcherConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frontend: FrontendConfig::default(),
            gate: GateConfig::default(),
            embedder: EmbedderSection::default(),
            index: IndexConfig {
                seed: 7,
                ..IndexConfig::default()
            },
            matcher: MatcherConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialized form: every field, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Sets the master seed and the index training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.index.seed = seed;
        self
    }

    pub fn embedder_topology(&self) -> EmbedderTopology {
        EmbedderTopology::with_dim(self.embedder.dim)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.frontend.validate().map_err(|e| invalid(&e))?;
        if self.frontend.mel_bins != crate::MEL_BINS {
            return Err(ConfigError::Invalid(format!(
                "frontend.mel_bins must be {} (the networks' input width)",
                crate::MEL_BINS
            )));
        }
        self.gate.validate().map_err(|e| invalid(&e))?;
        if ![64, 96, 128].contains(&self.embedder.dim) {
            return Err(ConfigError::Invalid(format!(
                "embedder.dim must be 64, 96 or 128, got {}",
                self.embedder.dim
            )));
        }
        self.embedder_topology().validate().map_err(|e| invalid(&e))?;
        self.index.validate().map_err(|e| invalid(&e))?;
        if let Some(m) = self.index.subspaces {
            if self.embedder.dim % m != 0 {
                return Err(ConfigError::Invalid(format!(
                    "index.subspaces = {m} does not divide embedder.dim = {}",
                    self.embedder.dim
                )));
            }
        }
        self.matcher.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }
}
