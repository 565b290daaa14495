use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

/// Shape and regularization of the encoder-decoder transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Reuse the decoder token embedding as the output projection.
    pub tie_output: bool,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale model: 2+2 layers, d = 64, 4 heads, ffn 256.
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 64,
            max_positions: 64,
            dropout: 0.1,
            activation: Activation::Relu,
            tie_output: false,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 12+12 layer, d = 1024 reference shape. Only used for parameter
    /// accounting; never instantiated.
    pub fn paper_scale() -> Self {
        Self {
            enc_layers: 12,
            dec_layers: 12,
            d_model: 1024,
            heads: 16,
            ffn_dim: 4096,
            vocab_size: 250_000,
            max_positions: 1024,
            dropout: 0.3,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn total_layers(&self) -> usize {
        self.enc_layers + self.dec_layers
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for the 4 reserved ids",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config(format!("ln_eps must be > 0, got {}", self.ln_eps)));
        }
        Ok(())
    }
}
