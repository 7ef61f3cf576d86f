use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How token positions enter the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// GPT-2 style learned absolute position table added to the token embedding.
    #[default]
    LearnedAbsolute,
}

/// Architecture hyper-parameters of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub layernorm_epsilon: f32,
    /// Inner width of the MLP sublayer (4 * d_model for GPT-2).
    pub mlp_hidden: usize,
    #[serde(default)]
    pub position_encoding: PositionEncoding,
}

/// Subset of a HuggingFace GPT-2 `config.json`.
#[derive(Deserialize)]
struct HfGpt2Config {
    n_layer: usize,
    n_head: usize,
    n_embd: usize,
    vocab_size: usize,
    n_positions: usize,
    #[serde(default = "default_eps")]
    layer_norm_epsilon: f32,
    #[serde(default)]
    n_inner: Option<usize>,
}

fn default_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    /// The public GPT-2 small (124M) architecture.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            vocab_size: 50257,
            max_context: 1024,
            layernorm_epsilon: 1e-5,
            mlp_hidden: 3072,
            position_encoding: PositionEncoding::LearnedAbsolute,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layernorm_epsilon.is_finite() && self.layernorm_epsilon > 0.0) {
            return Err(Error::Config("layernorm_epsilon must be a small positive real".into()));
        }
        Ok(())
    }

    /// Reads either a native config (this struct serialized) or a HuggingFace
    /// GPT-2 `config.json`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let config = if value.get("n_layers").is_some() {
            serde_json::from_value::<ModelConfig>(value)?
        } else {
            let hf: HfGpt2Config = serde_json::from_value(value)?;
            ModelConfig {
                n_layers: hf.n_layer,
                n_heads: hf.n_head,
                d_model: hf.n_embd,
                vocab_size: hf.vocab_size,
                max_context: hf.n_positions,
                layernorm_epsilon: hf.layer_norm_epsilon,
                mlp_hidden: hf.n_inner.unwrap_or(4 * hf.n_embd),
                position_encoding: PositionEncoding::LearnedAbsolute,
            }
        };
        config.validate()?;
        Ok(config)
    }
}
