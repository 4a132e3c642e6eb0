// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer runtime with residual-stream taps.
//!
//! A forward pass records, at one token position, the residual stream right
//! after each attention update (post-ATT) and right after each MLP update
//! (post-MLP), for every layer. For the parallel-residual family, whose
//! attention and MLP read the same input, the taps are
//! `post_att(k) = x_k + attn_k` and `post_mlp(k) = x_k + attn_k + mlp_k`.

mod config;
mod layers;
mod loader;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{Activation, Family, ModelConfig};
pub use loader::TensorStore;

use crate::error::{Error, Result};
use layers::{activate, softmax_in_place, LayerNorm, Linear, RotaryTables};

pub type TokenId = u32;

#[derive(Debug, Clone)]
pub(crate) enum Positional {
    /// `[max_context * d_model]`
    Learned(Vec<f32>),
    Rotary(RotaryTables),
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub(crate) ln_attn: LayerNorm,
    /// Output columns laid out `[Q | K | V]`, each head-major.
    pub(crate) qkv: Linear,
    pub(crate) attn_out: Linear,
    pub(crate) ln_mlp: LayerNorm,
    pub(crate) mlp_in: Linear,
    pub(crate) mlp_out: Linear,
}

/// Immutable model. Shareable across threads; every forward pass owns its
/// activation buffers.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    /// `[vocab_size * d_model]`
    token_embeddings: Vec<f32>,
    positional: Positional,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    /// `[d_model * vocab_size]`
    lm_head: Linear,
}

/// Which additive update a tap follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKind {
    #[serde(rename = "post_att")]
    PostAttention,
    #[serde(rename = "post_mlp")]
    PostMlp,
}

impl SiteKind {
    pub const ALL: [SiteKind; 2] = [SiteKind::PostAttention, SiteKind::PostMlp];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::PostAttention => "post_att",
            SiteKind::PostMlp => "post_mlp",
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A tap location. Layers are 1-based: layer 1 is the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TapSite {
    pub layer: usize,
    pub kind: SiteKind,
}

/// Vectors captured at one layer, at the tapped position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTaps {
    pub post_attention: Vec<f32>,
    pub post_mlp: Vec<f32>,
    /// What the attention module added to the stream (after any patch).
    pub attention_output: Vec<f32>,
    pub mlp_output: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapRecord {
    pub prompt_tokens: Vec<TokenId>,
    pub position: usize,
    /// Residual stream entering layer 1 (token + positional embedding).
    pub embedding: Vec<f32>,
    /// One entry per layer, index 0 = layer 1.
    pub layers: Vec<LayerTaps>,
    pub final_logits: Vec<f32>,
}

impl TapRecord {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tap(&self, site: TapSite) -> &[f32] {
        let layer = &self.layers[site.layer - 1];
        match site.kind {
            SiteKind::PostAttention => &layer.post_attention,
            SiteKind::PostMlp => &layer.post_mlp,
        }
    }

    /// All `(site, vector)` pairs, layer-major, post-ATT before post-MLP.
    pub fn taps(&self) -> impl Iterator<Item = (TapSite, &[f32])> + '_ {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            [
                (
                    TapSite {
                        layer: i + 1,
                        kind: SiteKind::PostAttention,
                    },
                    l.post_attention.as_slice(),
                ),
                (
                    TapSite {
                        layer: i + 1,
                        kind: SiteKind::PostMlp,
                    },
                    l.post_mlp.as_slice(),
                ),
            ]
        })
    }

    /// Attention module output at `layer` (1-based).
    pub fn attention_output(&self, layer: usize) -> &[f32] {
        &self.layers[layer - 1].attention_output
    }
}

/// Replacement for one attention module's output at the tapped position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPatch {
    /// 1-based layer.
    pub layer: usize,
    pub vector: Vec<f32>,
}

/// Iterate all tap sites of an `n_layers` model in canonical order.
pub fn tap_sites(n_layers: usize) -> impl Iterator<Item = TapSite> {
    (1..=n_layers).flat_map(|layer| SiteKind::ALL.map(|kind| TapSite { layer, kind }))
}

/// Load a model from a config file and a safetensors source (file, directory
/// of shards, or shard index json).
pub fn load_model(config_path: &Path, weights: &Path) -> Result<Model> {
    let config = ModelConfig::from_path(config_path)?;
    let store = TensorStore::open(weights)?;
    Model::from_store(config, &store)
}

impl Model {
    pub fn from_store(config: ModelConfig, store: &TensorStore) -> Result<Self> {
        loader::build_model(config, store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// The LM head as a row-major `[d_model, vocab_size]` matrix.
    pub fn lm_head_matrix(&self) -> &[f32] {
        &self.lm_head.weight
    }

    /// Apply the final normalization to one residual vector.
    pub fn final_norm(&self, x: &[f32]) -> Vec<f32> {
        self.final_norm.apply(x)
    }

    /// Final normalization followed by the LM head.
    pub fn unembed(&self, residual: &[f32]) -> Result<Vec<f32>> {
        if residual.len() != self.config.d_model {
            return Err(Error::LengthMismatch {
                expected: self.config.d_model,
                got: residual.len(),
            });
        }
        if residual.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual vector".into()));
        }
        Ok(self.lm_head.forward(&self.final_norm(residual), 1))
    }

    pub fn forward_with_taps(&self, tokens: &[TokenId], position: usize) -> Result<TapRecord> {
        self.run(tokens, position, None)
    }

    pub fn forward_with_patch(
        &self,
        tokens: &[TokenId],
        position: usize,
        patch: &AttentionPatch,
    ) -> Result<TapRecord> {
        let n = self.config.n_layers;
        if patch.layer == 0 || patch.layer > n {
            return Err(Error::LayerOutOfRange {
                layer: patch.layer,
                n_layers: n,
            });
        }
        if patch.vector.len() != self.config.d_model {
            return Err(Error::LengthMismatch {
                expected: self.config.d_model,
                got: patch.vector.len(),
            });
        }
        if patch.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch vector".into()));
        }
        self.run(tokens, position, Some(patch))
    }

    fn validate_input(&self, tokens: &[TokenId], position: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if position >= tokens.len() {
            return Err(Error::PositionOutOfRange {
                position,
                len: tokens.len(),
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn run(
        &self,
        tokens: &[TokenId],
        position: usize,
        patch: Option<&AttentionPatch>,
    ) -> Result<TapRecord> {
        self.validate_input(tokens, position)?;
        let d = self.config.d_model;
        // Causal masking makes positions after `position` irrelevant to it.
        let seq = position + 1;
        let mut x = self.embed(&tokens[..seq]);
        let embedding = x[position * d..seq * d].to_vec();
        let mut layers = Vec::with_capacity(self.config.n_layers);

        for (l, block) in self.blocks.iter().enumerate() {
            let h = block.ln_attn.apply_rows(&x, d);
            let mut attn = self.attention(block, &h, seq);
            if let Some(p) = patch.filter(|p| p.layer == l + 1) {
                attn[position * d..seq * d].copy_from_slice(&p.vector);
            }
            let (mlp, post_attention, post_mlp);
            match self.config.family {
                Family::SequentialPreNorm => {
                    add_assign(&mut x, &attn);
                    post_attention = x[position * d..seq * d].to_vec();
                    mlp = self.mlp(block, &block.ln_mlp.apply_rows(&x, d), seq);
                    add_assign(&mut x, &mlp);
                    post_mlp = x[position * d..seq * d].to_vec();
                }
                Family::ParallelRotary => {
                    mlp = self.mlp(block, &block.ln_mlp.apply_rows(&x, d), seq);
                    add_assign(&mut x, &attn);
                    post_attention = x[position * d..seq * d].to_vec();
                    add_assign(&mut x, &mlp);
                    post_mlp = x[position * d..seq * d].to_vec();
                }
            }
            layers.push(LayerTaps {
                post_attention,
                post_mlp,
                attention_output: attn[position * d..seq * d].to_vec(),
                mlp_output: mlp[position * d..seq * d].to_vec(),
            });
        }

        let final_logits = self.unembed(&x[position * d..seq * d])?;
        Ok(TapRecord {
            prompt_tokens: tokens.to_vec(),
            position,
            embedding,
            layers,
            final_logits,
        })
    }

    fn embed(&self, tokens: &[TokenId]) -> Vec<f32> {
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            let row = &self.token_embeddings[t as usize * d..(t as usize + 1) * d];
            match &self.positional {
                Positional::Learned(wpe) => {
                    let p = &wpe[pos * d..(pos + 1) * d];
                    x.extend(row.iter().zip(p).map(|(a, b)| a + b));
                }
                Positional::Rotary(_) => x.extend_from_slice(row),
            }
        }
        x
    }

    /// Causal multi-head self-attention over `seq` normalized rows, including
    /// the output projection.
    fn attention(&self, block: &Block, h: &[f32], seq: usize) -> Vec<f32> {
        let d = self.config.d_model;
        let d_head = self.config.d_head;
        let mut qkv = block.qkv.forward(h, seq);
        if let Positional::Rotary(rot) = &self.positional {
            for t in 0..seq {
                let row = &mut qkv[t * 3 * d..(t + 1) * 3 * d];
                for head in 0..self.config.n_heads {
                    let q = head * d_head;
                    rot.rotate(&mut row[q..q + d_head], t);
                    let k = d + head * d_head;
                    rot.rotate(&mut row[k..k + d_head], t);
                }
            }
        }
        let scale = 1.0 / (d_head as f32).sqrt();
        let mut mixed = vec![0.0f32; seq * d];
        let mut scores = Vec::with_capacity(seq);
        for head in 0..self.config.n_heads {
            let off = head * d_head;
            for t in 0..seq {
                let q = &qkv[t * 3 * d + off..t * 3 * d + off + d_head];
                scores.clear();
                for s in 0..=t {
                    let k = &qkv[s * 3 * d + d + off..s * 3 * d + d + off + d_head];
                    let dot: f32 = q.iter().zip(k).fold(0.0, |acc, (a, b)| acc + a * b);
                    scores.push(dot * scale);
                }
                softmax_in_place(&mut scores);
                let out = &mut mixed[t * d + off..t * d + off + d_head];
                for (s, &p) in scores.iter().enumerate() {
                    let v = &qkv[s * 3 * d + 2 * d + off..s * 3 * d + 2 * d + off + d_head];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
        }
        block.attn_out.forward(&mixed, seq)
    }

    fn mlp(&self, block: &Block, h: &[f32], seq: usize) -> Vec<f32> {
        let mut hidden = block.mlp_in.forward(h, seq);
        activate(self.config.activation, &mut hidden);
        block.mlp_out.forward(&hidden, seq)
    }
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}
