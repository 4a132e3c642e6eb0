// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small random checkpoints in the published tensor layouts.
//!
//! Used by tests and smoke runs: they exercise the real loader, the real
//! config parser and both residual families without multi-gigabyte downloads.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::Dtype;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{Family, Model, ModelConfig, TensorStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageDtype {
    F32,
    F16,
}

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub family: Family,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rotary_fraction: f32,
    /// Half-width of the uniform weight distribution.
    pub scale: f32,
    pub seed: u64,
    pub dtype: StorageDtype,
}

impl FixtureSpec {
    /// 2 layers, d_model 8, vocabulary 16.
    pub fn tiny(family: Family) -> Self {
        Self {
            family,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 32,
            vocab_size: 16,
            max_context: 32,
            rotary_fraction: 0.5,
            scale: 0.5,
            seed: 0,
            dtype: StorageDtype::F32,
        }
    }

    /// A small model over a real vocabulary size, for end-to-end runs with a
    /// real tokenizer.
    pub fn toy(family: Family, vocab_size: usize) -> Self {
        Self {
            family,
            n_layers: 3,
            d_model: 16,
            n_heads: 4,
            d_mlp: 64,
            vocab_size,
            max_context: 64,
            rotary_fraction: 0.5,
            scale: 0.5,
            seed: 7,
            dtype: StorageDtype::F32,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Hugging Face style `config.json` for this fixture.
    pub fn hf_config(&self) -> Value {
        match self.family {
            Family::SequentialPreNorm => json!({
                "model_type": "gpt2",
                "n_layer": self.n_layers,
                "n_embd": self.d_model,
                "n_head": self.n_heads,
                "n_inner": self.d_mlp,
                "vocab_size": self.vocab_size,
                "n_positions": self.max_context,
                "layer_norm_epsilon": 1e-5,
                "activation_function": "gelu_new",
                "tie_word_embeddings": true,
            }),
            Family::ParallelRotary => json!({
                "model_type": "gpt_neox",
                "num_hidden_layers": self.n_layers,
                "hidden_size": self.d_model,
                "num_attention_heads": self.n_heads,
                "intermediate_size": self.d_mlp,
                "vocab_size": self.vocab_size,
                "max_position_embeddings": self.max_context,
                "rotary_pct": self.rotary_fraction,
                "rotary_emb_base": 10000,
                "layer_norm_eps": 1e-5,
                "hidden_act": "gelu",
                "use_parallel_residual": true,
                "tie_word_embeddings": false,
            }),
        }
    }

    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::from_hf(&self.hf_config())
    }

    /// Named tensors `(name, shape, values)` in checkpoint layout.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (d, v, m, ctx) = (self.d_model, self.vocab_size, self.d_mlp, self.max_context);
        let scale = self.scale;
        let mut out = Vec::new();
        let mut uniform = |name: String, shape: Vec<usize>, centre: f32| {
            let n = shape.iter().product();
            let values = (0..n)
                .map(|_| centre + rng.gen_range(-scale..scale))
                .collect();
            out.push((name, shape, values));
        };
        match self.family {
            Family::SequentialPreNorm => {
                let p = "transformer.";
                uniform(format!("{p}wte.weight"), vec![v, d], 0.0);
                uniform(format!("{p}wpe.weight"), vec![ctx, d], 0.0);
                for l in 0..self.n_layers {
                    let h = format!("{p}h.{l}");
                    uniform(format!("{h}.ln_1.weight"), vec![d], 1.0);
                    uniform(format!("{h}.ln_1.bias"), vec![d], 0.0);
                    uniform(format!("{h}.attn.c_attn.weight"), vec![d, 3 * d], 0.0);
                    uniform(format!("{h}.attn.c_attn.bias"), vec![3 * d], 0.0);
                    uniform(format!("{h}.attn.c_proj.weight"), vec![d, d], 0.0);
                    uniform(format!("{h}.attn.c_proj.bias"), vec![d], 0.0);
                    uniform(format!("{h}.ln_2.weight"), vec![d], 1.0);
                    uniform(format!("{h}.ln_2.bias"), vec![d], 0.0);
                    uniform(format!("{h}.mlp.c_fc.weight"), vec![d, m], 0.0);
                    uniform(format!("{h}.mlp.c_fc.bias"), vec![m], 0.0);
                    uniform(format!("{h}.mlp.c_proj.weight"), vec![m, d], 0.0);
                    uniform(format!("{h}.mlp.c_proj.bias"), vec![d], 0.0);
                }
                uniform(format!("{p}ln_f.weight"), vec![d], 1.0);
                uniform(format!("{p}ln_f.bias"), vec![d], 0.0);
            }
            Family::ParallelRotary => {
                let p = "gpt_neox.";
                uniform(format!("{p}embed_in.weight"), vec![v, d], 0.0);
                for l in 0..self.n_layers {
                    let h = format!("{p}layers.{l}");
                    uniform(format!("{h}.input_layernorm.weight"), vec![d], 1.0);
                    uniform(format!("{h}.input_layernorm.bias"), vec![d], 0.0);
                    uniform(format!("{h}.post_attention_layernorm.weight"), vec![d], 1.0);
                    uniform(format!("{h}.post_attention_layernorm.bias"), vec![d], 0.0);
                    uniform(
                        format!("{h}.attention.query_key_value.weight"),
                        vec![3 * d, d],
                        0.0,
                    );
                    uniform(
                        format!("{h}.attention.query_key_value.bias"),
                        vec![3 * d],
                        0.0,
                    );
                    uniform(format!("{h}.attention.dense.weight"), vec![d, d], 0.0);
                    uniform(format!("{h}.attention.dense.bias"), vec![d], 0.0);
                    uniform(format!("{h}.mlp.dense_h_to_4h.weight"), vec![m, d], 0.0);
                    uniform(format!("{h}.mlp.dense_h_to_4h.bias"), vec![m], 0.0);
                    uniform(format!("{h}.mlp.dense_4h_to_h.weight"), vec![d, m], 0.0);
                    uniform(format!("{h}.mlp.dense_4h_to_h.bias"), vec![d], 0.0);
                }
                uniform(format!("{p}final_layer_norm.weight"), vec![d], 1.0);
                uniform(format!("{p}final_layer_norm.bias"), vec![d], 0.0);
                uniform("embed_out.weight".to_string(), vec![v, d], 0.0);
            }
        }
        out
    }

    pub fn safetensors_bytes(&self) -> Result<Vec<u8>> {
        serialize_tensors(&self.tensors(), self.dtype)
    }

    /// Build the model in memory through the regular loader.
    pub fn build(&self) -> Result<Model> {
        let store = TensorStore::from_bytes(self.safetensors_bytes()?)?;
        Model::from_store(self.config()?, &store)
    }

    /// Write `config.json` and `model.safetensors` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.hf_config())
            .map_err(|e| Error::json("fixture config", e))?;
        std::fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))?;
        let weights = dir.join("model.safetensors");
        std::fs::write(&weights, self.safetensors_bytes()?).map_err(|e| Error::io(&weights, e))
    }
}

/// Serialize named tensors into a safetensors container.
pub fn serialize_tensors(
    tensors: &[(String, Vec<usize>, Vec<f32>)],
    dtype: StorageDtype,
) -> Result<Vec<u8>> {
    let encoded: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, shape, values)| {
            let bytes = match dtype {
                StorageDtype::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
                StorageDtype::F16 => values
                    .iter()
                    .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
                    .collect(),
            };
            (name.clone(), shape.clone(), bytes)
        })
        .collect();
    let st_dtype = match dtype {
        StorageDtype::F32 => Dtype::F32,
        StorageDtype::F16 => Dtype::F16,
    };
    let views = encoded
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(st_dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Container(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &None).map_err(|e| Error::Container(e.to_string()))
}
