// SPDX-License-Identifier: MIT OR Apache-2.0

//! Safetensors container access and checkpoint-to-`Model` mapping.
//!
//! Supported tensor naming (Hugging Face layouts):
//!
//! | role                | GPT-2 (`transformer.` prefix optional) | GPT-NeoX (`gpt_neox.` prefix)            |
//! |---------------------|----------------------------------------|------------------------------------------|
//! | token embedding     | `wte.weight` `[V, d]`                  | `embed_in.weight` `[V, d]`               |
//! | positions           | `wpe.weight` `[ctx, d]`                | rotary, computed                          |
//! | pre-attention norm  | `h.{l}.ln_1.{weight,bias}`             | `layers.{l}.input_layernorm.*`           |
//! | qkv projection      | `h.{l}.attn.c_attn.*` `[d, 3d]`        | `layers.{l}.attention.query_key_value.*` `[3d, d]` |
//! | attention output    | `h.{l}.attn.c_proj.*` `[d, d]`         | `layers.{l}.attention.dense.*`           |
//! | pre-MLP norm        | `h.{l}.ln_2.*`                         | `layers.{l}.post_attention_layernorm.*`  |
//! | MLP in / out        | `h.{l}.mlp.c_fc.*`, `h.{l}.mlp.c_proj.*` | `layers.{l}.mlp.dense_h_to_4h.*`, `dense_4h_to_h.*` |
//! | final norm          | `ln_f.*`                               | `final_layer_norm.*`                     |
//! | LM head             | tied to `wte` (or `lm_head.weight`)    | `embed_out.weight` `[V, d]` (no prefix)  |
//!
//! GPT-2 stores `Conv1D` weights input-major already; NeoX `Linear` weights are
//! output-major and get transposed. NeoX packs q/k/v per head, which is
//! reordered at load into the `[Q | K | V]` layout GPT-2 uses.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use safetensors::{Dtype, SafeTensors};

use super::config::{Family, ModelConfig};
use super::layers::{LayerNorm, Linear, RotaryTables};
use super::{Block, Model, Positional};
use crate::error::{Error, Result};

/// Read-only view over one or more safetensors files.
pub struct TensorStore {
    files: Vec<Buffer>,
    index: HashMap<String, usize>,
}

enum Buffer {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl std::ops::Deref for Buffer {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        match self {
            Buffer::Mapped(m) => m,
            Buffer::Owned(v) => v,
        }
    }
}

impl TensorStore {
    /// Open a single `.safetensors` file, a directory of them, or a
    /// `*.safetensors.index.json` shard index.
    pub fn open(source: &Path) -> Result<Self> {
        let paths = resolve_sources(source)?;
        let mut files = Vec::with_capacity(paths.len());
        let mut index = HashMap::new();
        for (i, path) in paths.iter().enumerate() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            // SAFETY: the mapping is read-only and the store never hands out
            // mutable access; concurrent truncation of checkpoint files is not supported.
            let mmap = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?;
            let st = SafeTensors::deserialize(&mmap)
                .map_err(|e| Error::Container(format!("{}: {e}", path.display())))?;
            for name in st.names() {
                index.insert(name.to_string(), i);
            }
            files.push(Buffer::Mapped(mmap));
        }
        Ok(Self { files, index })
    }

    /// Wrap an in-memory safetensors container.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let index = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Container(e.to_string()))?
            .names()
            .into_iter()
            .map(|n| (n.to_string(), 0))
            .collect();
        Ok(Self {
            files: vec![Buffer::Owned(bytes)],
            index,
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Shape of a stored tensor, if present.
    pub fn shape(&self, name: &str) -> Option<Vec<usize>> {
        let file = *self.index.get(name)?;
        let st = SafeTensors::deserialize(&self.files[file]).ok()?;
        st.tensor(name).ok().map(|t| t.shape().to_vec())
    }

    /// Load `name` as f32, upcasting 16-bit storage, after checking the shape
    /// and that every value is finite.
    pub fn load(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let file = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        let st = SafeTensors::deserialize(&self.files[file])
            .map_err(|e| Error::Container(e.to_string()))?;
        let view = st
            .tensor(name)
            .map_err(|_| Error::MissingWeight(name.to_string()))?;
        if view.shape() != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: view.shape().to_vec(),
            });
        }
        let bytes = view.data();
        let values: Vec<f32> = match view.dtype() {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect(),
            other => {
                return Err(Error::UnsupportedDtype {
                    name: name.to_string(),
                    dtype: format!("{other:?}"),
                })
            }
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptTensor(name.to_string()));
        }
        Ok(values)
    }
}

fn resolve_sources(source: &Path) -> Result<Vec<PathBuf>> {
    if source.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(source)
            .map_err(|e| Error::io(source, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "safetensors"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Container(format!(
                "no .safetensors files in {}",
                source.display()
            )));
        }
        return Ok(paths);
    }
    if source.extension().is_some_and(|ext| ext == "json") {
        let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::json(source.display().to_string(), e))?;
        let map = value
            .get("weight_map")
            .and_then(|m| m.as_object())
            .ok_or_else(|| Error::Container("shard index lacks weight_map".into()))?;
        let dir = source.parent().unwrap_or(Path::new("."));
        let mut shards: Vec<PathBuf> = map
            .values()
            .filter_map(|v| v.as_str())
            .map(|f| dir.join(f))
            .collect();
        shards.sort();
        shards.dedup();
        return Ok(shards);
    }
    Ok(vec![source.to_path_buf()])
}

/// Transpose a row-major `[rows, cols]` matrix.
fn transpose(m: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

pub(crate) fn build_model(config: ModelConfig, store: &TensorStore) -> Result<Model> {
    config.validate()?;
    match config.family {
        Family::SequentialPreNorm => build_gpt2(config, store),
        Family::ParallelRotary => build_neox(config, store),
    }
}

fn build_gpt2(config: ModelConfig, store: &TensorStore) -> Result<Model> {
    let prefix = if store.contains("transformer.wte.weight") {
        "transformer."
    } else {
        ""
    };
    let name = |s: &str| format!("{prefix}{s}");
    let (d, v, ctx, m) = (
        config.d_model,
        config.vocab_size,
        config.max_context,
        config.d_mlp,
    );
    let eps = config.layernorm_epsilon;
    let norm = |base: &str| -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: store.load(&name(&format!("{base}.weight")), &[d])?,
            beta: store.load(&name(&format!("{base}.bias")), &[d])?,
            eps,
        })
    };
    let conv = |base: &str, d_in: usize, d_out: usize| -> Result<Linear> {
        Ok(Linear::new(
            store.load(&name(&format!("{base}.weight")), &[d_in, d_out])?,
            store.load(&name(&format!("{base}.bias")), &[d_out])?,
            d_in,
            d_out,
        ))
    };

    let token_embeddings = store.load(&name("wte.weight"), &[v, d])?;
    let positions = store.load(&name("wpe.weight"), &[ctx, d])?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        blocks.push(Block {
            ln_attn: norm(&format!("h.{l}.ln_1"))?,
            qkv: conv(&format!("h.{l}.attn.c_attn"), d, 3 * d)?,
            attn_out: conv(&format!("h.{l}.attn.c_proj"), d, d)?,
            ln_mlp: norm(&format!("h.{l}.ln_2"))?,
            mlp_in: conv(&format!("h.{l}.mlp.c_fc"), d, m)?,
            mlp_out: conv(&format!("h.{l}.mlp.c_proj"), m, d)?,
        });
    }
    let final_norm = norm("ln_f")?;
    let head = if config.tied_embeddings {
        transpose(&token_embeddings, v, d)
    } else {
        transpose(&store.load("lm_head.weight", &[v, d])?, v, d)
    };
    Ok(Model {
        lm_head: Linear::new(head, vec![0.0; v], d, v),
        token_embeddings,
        positional: Positional::Learned(positions),
        blocks,
        final_norm,
        config,
    })
}

fn build_neox(config: ModelConfig, store: &TensorStore) -> Result<Model> {
    let name = |s: &str| format!("gpt_neox.{s}");
    let (d, v, m) = (config.d_model, config.vocab_size, config.d_mlp);
    let (n_heads, d_head) = (config.n_heads, config.d_head);
    let eps = config.layernorm_epsilon;
    let norm = |base: &str| -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: store.load(&name(&format!("{base}.weight")), &[d])?,
            beta: store.load(&name(&format!("{base}.bias")), &[d])?,
            eps,
        })
    };
    // torch Linear: weight [out, in]
    let linear = |base: &str, d_in: usize, d_out: usize| -> Result<Linear> {
        let w = store.load(&name(&format!("{base}.weight")), &[d_out, d_in])?;
        Ok(Linear::new(
            transpose(&w, d_out, d_in),
            store.load(&name(&format!("{base}.bias")), &[d_out])?,
            d_in,
            d_out,
        ))
    };

    let token_embeddings = store.load(&name("embed_in.weight"), &[v, d])?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let packed = linear(&format!("layers.{l}.attention.query_key_value"), d, 3 * d)?;
        blocks.push(Block {
            ln_attn: norm(&format!("layers.{l}.input_layernorm"))?,
            qkv: unpack_neox_qkv(&packed, n_heads, d_head),
            attn_out: linear(&format!("layers.{l}.attention.dense"), d, d)?,
            ln_mlp: norm(&format!("layers.{l}.post_attention_layernorm"))?,
            mlp_in: linear(&format!("layers.{l}.mlp.dense_h_to_4h"), d, m)?,
            mlp_out: linear(&format!("layers.{l}.mlp.dense_4h_to_h"), m, d)?,
        });
    }
    let final_norm = norm("final_layer_norm")?;
    let head = if config.tied_embeddings {
        transpose(&token_embeddings, v, d)
    } else {
        transpose(&store.load("embed_out.weight", &[v, d])?, v, d)
    };
    let rotary = RotaryTables::new(config.rotary_dims(), config.rotary_base, config.max_context);
    Ok(Model {
        lm_head: Linear::new(head, vec![0.0; v], d, v),
        token_embeddings,
        positional: Positional::Rotary(rotary),
        blocks,
        final_norm,
        config,
    })
}

/// Reorder output columns from per-head `[q_h | k_h | v_h]` to `[Q | K | V]`.
fn unpack_neox_qkv(packed: &Linear, n_heads: usize, d_head: usize) -> Linear {
    let d = n_heads * d_head;
    let old_col = |new: usize| {
        let which = new / d;
        let head = (new % d) / d_head;
        let j = new % d_head;
        head * 3 * d_head + which * d_head + j
    };
    let d_out = 3 * d;
    let mut weight = vec![0.0; packed.weight.len()];
    for i in 0..packed.d_in {
        for new in 0..d_out {
            weight[i * d_out + new] = packed.weight[i * d_out + old_col(new)];
        }
    }
    let bias = (0..d_out).map(|new| packed.bias[old_col(new)]).collect();
    Linear::new(weight, bias, packed.d_in, d_out)
}
