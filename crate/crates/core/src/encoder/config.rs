use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_labels: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Six-layer, 64-wide default used for the synthetic experiments.
    pub fn toy(vocab_size: usize, num_labels: usize) -> Self {
        ModelConfig {
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            num_labels,
            vocab_size,
            max_len: 128,
        }
    }

    /// BERT-base geometry. Only meaningful for cost accounting.
    pub fn bert_base(num_labels: usize, max_len: usize) -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            num_labels,
            vocab_size: 30522,
            max_len,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_layers < 1 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_labels < 2 {
            return fail(format!(
                "num_labels must be at least 2 (got {}); normalized entropy needs log C > 0",
                self.num_labels
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return fail("ffn_dim, vocab_size and max_len must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ModelConfig::toy(10, 3);
        assert!(c.validate().is_ok());
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(10, 1);
        assert!(c.validate().is_err());
        c.num_labels = 2;
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }
}
