//! Policy model configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_tie() -> bool {
    true
}

impl Default for ModelConfig {
    /// Desk-scale default: ~0.9M parameters with the probe layer sitting in
    /// the middle of the stack.
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 128,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::InvalidConfig(
                "n_layers must be >= 2 so a probe layer strictly inside the stack exists".into(),
            ));
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig("vocab_size must be >= 4".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Default probe layer: middle of the stack.
    pub fn mid_layer(&self) -> usize {
        self.n_layers / 2
    }
}

/// A tiny configuration used throughout unit tests where full desk scale
/// would be wasteful.
pub fn micro_config() -> ModelConfig {
    ModelConfig { vocab_size: 32, d_model: 32, n_layers: 2, n_heads: 2, max_seq_len: 48, tie_embeddings: true }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_divisibility() {
        let mut cfg = ModelConfig::default();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn rejects_single_layer() {
        let mut cfg = ModelConfig::default();
        cfg.n_layers = 1;
        assert!(cfg.validate().is_err());
    }
}
