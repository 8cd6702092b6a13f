use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes of the Backpack and of the host Transformer LM.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Senses per word (`k`).
    pub sense_count: usize,
    /// Contextualizer width.
    pub model_dim: usize,
    /// Width of the sense vectors and the output embedding.
    pub sense_dim: usize,
    pub ctx_layers: usize,
    pub ctx_heads: usize,
    pub ctx_mlp_dim: usize,
    pub max_len: usize,
    pub host_layers: usize,
    pub host_heads: usize,
    pub host_dim: usize,
    pub host_mlp_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 288,
            sense_count: 4,
            model_dim: 32,
            sense_dim: 128,
            ctx_layers: 2,
            ctx_heads: 2,
            ctx_mlp_dim: 128,
            max_len: 64,
            host_layers: 4,
            host_heads: 4,
            host_dim: 64,
            host_mlp_dim: 256,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sense_count < 1 {
            return bad("sense_count must be at least 1");
        }
        if self.model_dim < 2 {
            return bad("model_dim must be at least 2");
        }
        if self.sense_dim < 1 {
            return bad("sense_dim must be at least 1");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.max_len < 1 {
            return bad("max_len must be at least 1");
        }
        if self.ctx_heads == 0 || self.model_dim % self.ctx_heads != 0 {
            return bad("model_dim must be divisible by ctx_heads");
        }
        if self.host_heads == 0 || self.host_dim % self.host_heads != 0 {
            return bad("host_dim must be divisible by host_heads");
        }
        if self.ctx_mlp_dim == 0 || self.host_mlp_dim == 0 || self.host_dim == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn degenerate_shapes_are_rejected() {
        for cfg in [
            ModelConfig { sense_count: 0, ..Default::default() },
            ModelConfig { model_dim: 1, ctx_heads: 1, ..Default::default() },
            ModelConfig { vocab_size: 1, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
