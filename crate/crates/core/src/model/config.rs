// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture configuration.
//!
//! Configs are read from the `config.json` files that ship with Hugging Face
//! checkpoints (`model_type` = `gpt2` or `gpt_neox`). Only the fields that
//! affect inference are kept.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Residual-stream layout of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// GPT-2: `x += attn(ln1(x)); x += mlp(ln2(x))`, learned absolute positions.
    #[serde(rename = "sequential-residual-prelnorm")]
    SequentialPreNorm,
    /// GPT-NeoX: `x += attn(ln1(x)) + mlp(ln2(x))`, rotary positions.
    #[serde(rename = "parallel-residual-rotary")]
    ParallelRotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation (`gelu_new`, `gelu_fast`, `gelu_pytorch_tanh`).
    GeluTanh,
    /// exact erf form (`gelu`).
    GeluErf,
}

impl Activation {
    fn from_hf(name: &str) -> Result<Self> {
        match name {
            "gelu_new" | "gelu_fast" | "gelu_pytorch_tanh" => Ok(Activation::GeluTanh),
            "gelu" => Ok(Activation::GeluErf),
            other => Err(Error::Config(format!("unsupported activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    /// Fraction of each head's dimensions that are rotated. Parallel family only.
    pub rotary_fraction: f32,
    pub rotary_base: f32,
    pub layernorm_epsilon: f32,
    pub activation: Activation,
    /// LM head shares the token embedding matrix.
    pub tied_embeddings: bool,
}

impl ModelConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config does not parse: {e}")))?;
        Self::from_hf(&value)
    }

    /// Build from a Hugging Face `config.json` value.
    pub fn from_hf(value: &Value) -> Result<Self> {
        let model_type = value
            .get("model_type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config("missing model_type".into()))?;
        let config = match model_type {
            "gpt2" => {
                let d_model = usize_field(value, "n_embd")?;
                let n_heads = usize_field(value, "n_head")?;
                let d_mlp = match value.get("n_inner") {
                    Some(Value::Number(n)) => n
                        .as_u64()
                        .ok_or_else(|| Error::Config("n_inner must be a count".into()))?
                        as usize,
                    _ => 4 * d_model,
                };
                ModelConfig {
                    family: Family::SequentialPreNorm,
                    n_layers: usize_field(value, "n_layer")?,
                    d_model,
                    n_heads,
                    d_head: if n_heads == 0 { 0 } else { d_model / n_heads },
                    d_mlp,
                    vocab_size: usize_field(value, "vocab_size")?,
                    max_context: usize_field(value, "n_positions")?,
                    rotary_fraction: 0.0,
                    rotary_base: 10000.0,
                    layernorm_epsilon: f32_field_or(value, "layer_norm_epsilon", 1e-5)?,
                    activation: Activation::from_hf(
                        value
                            .get("activation_function")
                            .and_then(Value::as_str)
                            .unwrap_or("gelu_new"),
                    )?,
                    tied_embeddings: value
                        .get("tie_word_embeddings")
                        .and_then(Value::as_bool)
                        .unwrap_or(true),
                }
            }
            "gpt_neox" => {
                if value.get("use_parallel_residual").and_then(Value::as_bool) == Some(false) {
                    return Err(Error::Config(
                        "gpt_neox with use_parallel_residual=false is not supported".into(),
                    ));
                }
                let d_model = usize_field(value, "hidden_size")?;
                let n_heads = usize_field(value, "num_attention_heads")?;
                // Older configs use rotary_pct / rotary_emb_base, newer ones nest
                // them under rope_parameters.
                let rope = value.get("rope_parameters");
                let rotary_fraction = match value.get("rotary_pct") {
                    Some(v) => as_f32(v, "rotary_pct")?,
                    None => match rope.and_then(|r| r.get("partial_rotary_factor")) {
                        Some(v) => as_f32(v, "partial_rotary_factor")?,
                        None => 0.25,
                    },
                };
                let rotary_base = match value.get("rotary_emb_base") {
                    Some(v) => as_f32(v, "rotary_emb_base")?,
                    None => match rope.and_then(|r| r.get("rope_theta")) {
                        Some(v) => as_f32(v, "rope_theta")?,
                        None => 10000.0,
                    },
                };
                ModelConfig {
                    family: Family::ParallelRotary,
                    n_layers: usize_field(value, "num_hidden_layers")?,
                    d_model,
                    n_heads,
                    d_head: if n_heads == 0 { 0 } else { d_model / n_heads },
                    d_mlp: usize_field(value, "intermediate_size")?,
                    vocab_size: usize_field(value, "vocab_size")?,
                    max_context: usize_field(value, "max_position_embeddings")?,
                    rotary_fraction,
                    rotary_base,
                    layernorm_epsilon: f32_field_or(value, "layer_norm_eps", 1e-5)?,
                    activation: Activation::from_hf(
                        value
                            .get("hidden_act")
                            .and_then(Value::as_str)
                            .unwrap_or("gelu"),
                    )?,
                    tied_embeddings: value
                        .get("tie_word_embeddings")
                        .and_then(Value::as_bool)
                        .unwrap_or(false),
                }
            }
            other => return Err(Error::Config(format!("unsupported model_type {other:?}"))),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers < 1 {
            return fail("n_layers must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be >= 2".into());
        }
        if self.n_heads == 0 || self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.max_context == 0 || self.d_mlp == 0 {
            return fail("max_context and d_mlp must be positive".into());
        }
        if !(self.layernorm_epsilon > 0.0 && self.layernorm_epsilon.is_finite()) {
            return fail("layernorm_epsilon must be a small positive real".into());
        }
        if self.family == Family::ParallelRotary {
            if !(0.0..=1.0).contains(&self.rotary_fraction) {
                return fail("rotary_fraction must lie in [0, 1]".into());
            }
            if self.rotary_dims() % 2 != 0 {
                return fail(format!("rotary dims {} must be even", self.rotary_dims()));
            }
        }
        Ok(())
    }

    /// Number of rotated dimensions per head (0 for the sequential family).
    pub fn rotary_dims(&self) -> usize {
        match self.family {
            Family::SequentialPreNorm => 0,
            Family::ParallelRotary => (self.d_head as f32 * self.rotary_fraction) as usize,
        }
    }

    /// Number of tap sites a forward pass produces.
    pub fn n_sites(&self) -> usize {
        2 * self.n_layers
    }
}

fn usize_field(value: &Value, key: &str) -> Result<usize> {
    value
        .get(key)
        .and_then(Value::as_u64)
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("missing or invalid count field {key}")))
}

fn as_f32(v: &Value, key: &str) -> Result<f32> {
    v.as_f64()
        .map(|x| x as f32)
        .ok_or_else(|| Error::Config(format!("field {key} must be a number")))
}

fn f32_field_or(value: &Value, key: &str, default: f32) -> Result<f32> {
    match value.get(key) {
        Some(v) => as_f32(v, key),
        None => Ok(default),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt2_xl_style_config() {
        let cfg = ModelConfig::from_json_str(
            r#"{"model_type":"gpt2","n_layer":48,"n_embd":1600,"n_head":25,
                "vocab_size":50257,"n_positions":1024,"layer_norm_epsilon":1e-5,
                "activation_function":"gelu_new"}"#,
        )
        .unwrap();
        assert_eq!(cfg.family, Family::SequentialPreNorm);
        assert_eq!(cfg.d_head, 64);
        assert_eq!(cfg.d_mlp, 6400);
        assert!(cfg.tied_embeddings);
        assert_eq!(cfg.n_sites(), 96);
    }

    #[test]
    fn neox_20b_style_config() {
        let cfg = ModelConfig::from_json_str(
            r#"{"model_type":"gpt_neox","num_hidden_layers":44,"hidden_size":6144,
                "num_attention_heads":64,"intermediate_size":24576,"vocab_size":50432,
                "max_position_embeddings":2048,"rotary_pct":0.25,"rotary_emb_base":10000,
                "layer_norm_eps":1e-5,"hidden_act":"gelu_fast","use_parallel_residual":true,
                "tie_word_embeddings":false}"#,
        )
        .unwrap();
        assert_eq!(cfg.family, Family::ParallelRotary);
        assert_eq!(cfg.d_head, 96);
        assert_eq!(cfg.rotary_dims(), 24);
        assert_eq!(cfg.activation, Activation::GeluTanh);
    }

    #[test]
    fn rejects_bad_head_split() {
        let err = ModelConfig::from_json_str(
            r#"{"model_type":"gpt2","n_layer":2,"n_embd":10,"n_head":3,
                "vocab_size":16,"n_positions":8}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("d_model"), "{err}");
    }

    #[test]
    fn rejects_unknown_model_type_and_garbage() {
        assert!(ModelConfig::from_json_str(r#"{"model_type":"llama"}"#).is_err());
        assert!(ModelConfig::from_json_str("not json").is_err());
        assert!(ModelConfig::from_json_str(
            r#"{"model_type":"gpt2","n_layer":0,"n_embd":8,"n_head":2,"vocab_size":16,"n_positions":8}"#
        )
        .is_err());
    }
}
