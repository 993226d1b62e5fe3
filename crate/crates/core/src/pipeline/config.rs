use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::losses::{LossGates, LossWeights};
use crate::model::{ArchFlags, ModelConfig, Pooling};

/// Environment variable that overrides the seed of any loaded config.
pub const SEED_ENV: &str = "HIERMINE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_fab: bool,
    pub use_channel_attn: bool,
    pub use_position_attn: bool,
    pub use_positive_head: bool,
    pub use_bound: bool,
    pub use_union: bool,
    pub use_amse: bool,
    pub pooling: Pooling,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        use_fab: true,
        use_channel_attn: true,
        use_position_attn: true,
        use_positive_head: true,
        use_bound: true,
        use_union: true,
        use_amse: true,
        pooling: Pooling::Lse,
    };

    /// Bound and union losses need the positive attention; without it they are off.
    pub fn normalized(mut self) -> Self {
        if !self.use_positive_head {
            self.use_bound = false;
            self.use_union = false;
        }
        self
    }

    pub fn arch(&self) -> ArchFlags {
        ArchFlags {
            use_fab: self.use_fab,
            use_channel_attn: self.use_channel_attn,
            use_position_attn: self.use_position_attn,
            pooling: self.pooling,
        }
    }

    pub fn gates(&self) -> LossGates {
        let f = self.normalized();
        LossGates {
            use_positive_head: f.use_positive_head,
            use_bound: f.use_bound,
            use_union: f.use_union,
            use_amse: f.use_amse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub every_n_epochs: usize,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self {
            factor: 0.1,
            every_n_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub augment: bool,
    pub ablation_flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: LrDecay::default(),
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            augment: true,
            ablation_flags: AblationFlags::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) || self.lr_decay.every_n_epochs == 0 {
            return Err(Error::Config("lr_decay needs factor in (0,1] and every_n_epochs >= 1".into()));
        }
        Ok(())
    }

    /// Step schedule: the base rate times `factor^(epoch / every_n_epochs)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.factor.powi((epoch / self.lr_decay.every_n_epochs) as i32)
    }

    /// Loss weights after gating by the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation_flags.gates().effective(&self.weights)
    }

    pub fn with_seed_override(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}

/// Parses TOML or JSON by file extension (`.json` is JSON, anything else TOML).
pub fn load_config_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
