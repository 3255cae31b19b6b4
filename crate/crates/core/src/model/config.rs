// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::component::ComponentId;
use crate::error::{Error, Result};

/// Architecture hyper-parameters of a GPT-2-style decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ln_epsilon: f32,
    /// Sequence-start token used when an answer token is processed in
    /// isolation. GPT-2 uses its end-of-text token (the last id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos_token_id: Option<u32>,
}

/// Accepts both the native field names and the Hugging Face GPT-2 ones.
#[derive(Deserialize)]
struct RawConfig {
    #[serde(alias = "n_layer")]
    n_layers: usize,
    #[serde(alias = "n_head")]
    n_heads: usize,
    #[serde(alias = "n_embd")]
    d_model: usize,
    d_head: Option<usize>,
    #[serde(alias = "n_inner")]
    d_mlp: Option<usize>,
    vocab_size: usize,
    #[serde(alias = "n_positions", alias = "n_ctx")]
    max_positions: usize,
    #[serde(alias = "layer_norm_epsilon")]
    ln_epsilon: Option<f32>,
    bos_token_id: Option<u32>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.ln_epsilon.is_nan() || self.ln_epsilon <= 0.0 {
            return Err(Error::Config("ln_epsilon must be positive".into()));
        }
        if let Some(bos) = self.bos_token_id {
            if bos as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "bos_token_id {bos} outside vocab of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        let d_head = match raw.d_head {
            Some(d) => d,
            None if raw.n_heads > 0 => raw.d_model / raw.n_heads,
            None => 0,
        };
        let cfg = ModelConfig {
            n_layers: raw.n_layers,
            n_heads: raw.n_heads,
            d_model: raw.d_model,
            d_head,
            d_mlp: raw.d_mlp.unwrap_or(4 * raw.d_model),
            vocab_size: raw.vocab_size,
            max_positions: raw.max_positions,
            ln_epsilon: raw.ln_epsilon.unwrap_or(1e-5),
            bos_token_id: raw.bos_token_id,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn bos(&self) -> u32 {
        self.bos_token_id.unwrap_or(self.vocab_size as u32 - 1)
    }

    /// Attention heads plus MLPs, excluding the embedding node.
    pub fn n_components(&self) -> usize {
        self.n_layers * (self.n_heads + 1)
    }

    /// Heads and MLPs in forward order: per layer the heads, then the MLP.
    pub fn components(&self) -> Vec<ComponentId> {
        let mut out = Vec::with_capacity(self.n_components());
        for l in 0..self.n_layers {
            out.extend((0..self.n_heads).map(|h| ComponentId::head(l, h)));
            out.push(ComponentId::mlp(l));
        }
        out
    }

    pub fn heads(&self) -> Vec<ComponentId> {
        (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| ComponentId::head(l, h)))
            .collect()
    }

    /// GPT-2 small.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            vocab_size: 50257,
            max_positions: 1024,
            ln_epsilon: 1e-5,
            bos_token_id: None,
        }
    }
}
