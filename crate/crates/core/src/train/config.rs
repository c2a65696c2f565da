use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ConvStage;
use crate::error::{Error, Result};
use crate::language::KeywordMode;
use crate::nn::SgdConfig;

pub const CONFIG_VERSION: u32 = 1;

fn default_stages() -> Vec<ConvStage> {
    vec![ConvStage::same3x3(8), ConvStage::same3x3(16), ConvStage::same3x3(32)]
}

/// Everything a training run needs besides data. Serialized as versioned
/// JSON; omitted fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    /// Rescales a batch gradient whose norm exceeds this value.
    pub clip_norm: Option<f64>,
    pub image_side: usize,
    pub stages: Vec<ConvStage>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub keyword_mode: KeywordMode,
    /// Train encoder weights together with the decoder.
    pub joint_finetune: bool,
    pub min_frequency: usize,
    /// Longest generated caption, `<end>` included.
    pub max_caption_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            sgd: SgdConfig::default(),
            clip_norm: Some(5.0),
            image_side: 32,
            stages: default_stages(),
            embed_dim: 32,
            hidden_dim: 64,
            keyword_mode: KeywordMode::On,
            joint_finetune: false,
            min_frequency: 1,
            max_caption_len: 24,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned for the disease classifier.
    pub fn classifier() -> Self {
        Self { epochs: 60, ..Self::default() }
    }

    /// Defaults tuned for the caption decoder.
    pub fn captioner() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            sgd: SgdConfig { learning_rate: 1.0, decay_factor: 5.0, decay_period_epochs: 50 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Data(format!(
                "train config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train config", "epochs and batch_size must be at least 1"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_caption_len == 0 || self.min_frequency == 0 {
            return Err(Error::invalid("train config", "model sizes, max_caption_len and min_frequency must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("train config", "clip_norm must be positive"));
            }
        }
        self.sgd.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Data(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes") + "\n"
    }
}
