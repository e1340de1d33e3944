use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{file_err, Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Architecture hyperparameters of the hierarchical transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_paragraphs: usize,
    pub max_paragraph_len: usize,
    pub max_target_len: usize,
    /// Dropout on attention probabilities.
    pub dropout_attention: f64,
    /// Dropout on sub-layer outputs before each residual sum.
    pub dropout_residual: f64,
    /// Dropout between the two feed-forward projections.
    pub dropout_ffn: f64,
    pub layer_norm_eps: f64,
    /// Prepend the title as the rank-0 paragraph.
    pub include_title: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-sized defaults.
    pub fn desk() -> Self {
        Self {
            vocab_size: 2000,
            model_dim: 64,
            ffn_dim: 256,
            num_heads: 4,
            num_layers: 2,
            max_paragraphs: 8,
            max_paragraph_len: 40,
            max_target_len: 60,
            dropout_attention: 0.3,
            dropout_residual: 0.3,
            dropout_ffn: 0.3,
            layer_norm_eps: 1e-6,
            include_title: true,
        }
    }

    /// The published WikiSum configuration.
    pub fn wikisum() -> Self {
        Self {
            vocab_size: 32_000,
            model_dim: 256,
            ffn_dim: 1024,
            num_heads: 4,
            num_layers: 3,
            max_paragraphs: 30,
            max_paragraph_len: 100,
            max_target_len: 200,
            ..Self::desk()
        }
    }

    /// Small enough to fit the bundled toy corpus in seconds.
    pub fn tiny() -> Self {
        Self {
            model_dim: 32,
            ffn_dim: 64,
            num_heads: 2,
            num_layers: 1,
            max_paragraphs: 6,
            max_paragraph_len: 16,
            max_target_len: 16,
            ..Self::desk()
        }
        .with_dropout(0.1)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_attention = rate;
        self.dropout_residual = rate;
        self.dropout_ffn = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("max_paragraphs", self.max_paragraphs),
            ("max_paragraph_len", self.max_paragraph_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.vocab_size <= crate::vocab::NUM_RESERVED {
            return Err(Error::Config("vocab_size must exceed the reserved ids".into()));
        }
        for (name, r) in [
            ("dropout_attention", self.dropout_attention),
            ("dropout_residual", self.dropout_residual),
            ("dropout_ffn", self.dropout_ffn),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Key-value document stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub schema_version: u32,
    /// Hash of the vocabulary the model was trained with.
    pub vocab_hash: String,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl ModelSidecar {
    pub fn new(model: ModelConfig, vocab_hash: impl Into<String>) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            vocab_hash: vocab_hash.into(),
            model,
        }
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if s.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                s.schema_version
            )));
        }
        s.model.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()?).map_err(file_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(file_err(path))?;
        Self::from_text(&text)
    }
}
