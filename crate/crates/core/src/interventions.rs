// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interchange interventions on attention outputs.
//!
//! For a base and a source query of equal token length, the source's
//! attention output at one layer (final token only) replaces the base's
//! during a base forward pass. Effects are differences in probability,
//! softmax over the full vocabulary, of the base and source gold tokens.
//!
//! Operand replacements are drawn uniformly from the valid values with a
//! ChaCha8 generator seeded by `seed` on stream `base.id`, so each base gets
//! its own reproducible draw.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{valid_values, ArithmeticQuery, Dataset};
use crate::error::{Error, Result};
use crate::lens::Distribution;
use crate::model::{AttentionPatch, Model, TapRecord, TokenId};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Operand1,
    Operand2,
    Operator,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::Operand1 => "operand1",
            Field::Operand2 => "operand2",
            Field::Operator => "operator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPair {
    pub id: usize,
    pub field: Field,
    pub base: ArithmeticQuery,
    pub source: ArithmeticQuery,
}

/// A base query for which no pair could be formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub base_id: usize,
    pub field: Field,
    pub reason: String,
}

/// Build the source query differing from `base` in exactly `field`.
pub fn derive_source(
    base: &ArithmeticQuery,
    field: Field,
    seed: u64,
    bound: u64,
    tokenizer: &Tokenizer,
) -> std::result::Result<InterventionPair, Skip> {
    let skip = |reason: String| Skip {
        base_id: base.id,
        field,
        reason,
    };
    if base.operands.len() != 2 {
        return Err(skip(format!(
            "{} operands, expected 2",
            base.operands.len()
        )));
    }
    let build = |operands: Vec<u64>, operators| {
        ArithmeticQuery::new(base.id, operands, operators, bound, tokenizer)
    };
    let base_len = tokenizer
        .encode(&base.prompt)
        .map_err(|e| skip(e.to_string()))?
        .len();
    let same_length = |q: &ArithmeticQuery| {
        tokenizer
            .encode(&q.prompt)
            .map(|t| t.len() == base_len)
            .unwrap_or(false)
    };
    let source = match field {
        Field::Operator => {
            let q = build(base.operands.clone(), vec![base.operators[0].flipped()])
                .map_err(|e| skip(format!("operator flip invalid: {e}")))?;
            if !same_length(&q) {
                return Err(skip("operator flip changes prompt length".into()));
            }
            q
        }
        Field::Operand1 | Field::Operand2 => {
            let slot = if field == Field::Operand1 { 0 } else { 1 };
            let candidates: Vec<ArithmeticQuery> = valid_values(tokenizer, bound)
                .into_iter()
                .filter(|&v| v != base.operands[slot])
                .filter_map(|v| {
                    let mut operands = base.operands.clone();
                    operands[slot] = v;
                    build(operands, base.operators.clone()).ok()
                })
                .filter(|q| same_length(q))
                .collect();
            if candidates.is_empty() {
                return Err(skip(format!("no valid replacement for {}", field.as_str())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(base.id as u64);
            candidates[rng.gen_range(0..candidates.len())].clone()
        }
    };
    Ok(InterventionPair {
        id: base.id,
        field,
        base: base.clone(),
        source,
    })
}

/// Pairs for every query of a 2-operand dataset; failures are returned, not
/// raised.
pub fn derive_pairs(
    dataset: &Dataset,
    field: Field,
    seed: u64,
    tokenizer: &Tokenizer,
) -> (Vec<InterventionPair>, Vec<Skip>) {
    let bound = dataset.spec.size_class.bound();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for q in &dataset.queries {
        match derive_source(q, field, seed, bound, tokenizer) {
            Ok(p) => pairs.push(p),
            Err(s) => skipped.push(s),
        }
    }
    (pairs, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub pair_id: usize,
    pub layer: usize,
    pub delta_base_prob: f64,
    pub delta_source_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEffect {
    pub layer: usize,
    pub n_pairs: usize,
    pub delta_base_prob: f64,
    pub delta_source_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub means: Vec<LayerEffect>,
    /// Pair-major, layer-minor.
    pub per_pair: Vec<InterventionOutcome>,
    pub skipped: Vec<Skip>,
}

struct Prepared<'a> {
    pair: &'a InterventionPair,
    base_tokens: Vec<TokenId>,
    base_run: TapRecord,
    source_run: TapRecord,
    base_dist: Distribution,
}

fn prepare<'a>(
    model: &Model,
    tokenizer: &Tokenizer,
    pair: &'a InterventionPair,
) -> Result<Prepared<'a>> {
    let base_tokens = tokenizer.encode(&pair.base.prompt)?;
    let source_tokens = tokenizer.encode(&pair.source.prompt)?;
    if base_tokens.len() != source_tokens.len() {
        return Err(Error::TokenLengthMismatch {
            base: base_tokens.len(),
            source_len: source_tokens.len(),
        });
    }
    let last = base_tokens.len().checked_sub(1).ok_or(Error::EmptyInput)?;
    let base_run = model.forward_with_taps(&base_tokens, last)?;
    let source_run = model.forward_with_taps(&source_tokens, last)?;
    let base_dist = Distribution::from_logits(&base_run.final_logits)?;
    Ok(Prepared {
        pair,
        base_tokens,
        base_run,
        source_run,
        base_dist,
    })
}

fn patched_outcome(model: &Model, p: &Prepared, layer: usize) -> Result<InterventionOutcome> {
    let patch = AttentionPatch {
        layer,
        vector: p.source_run.attention_output(layer).to_vec(),
    };
    let patched = model.forward_with_patch(&p.base_tokens, p.base_run.position, &patch)?;
    if patched.layers[..layer - 1] != p.base_run.layers[..layer - 1] {
        return Err(Error::InvalidQuery(format!(
            "patch at layer {layer} changed earlier taps for pair {}",
            p.pair.id
        )));
    }
    let dist = Distribution::from_logits(&patched.final_logits)?;
    let base_gold = p.pair.base.gold_token;
    let source_gold = p.pair.source.gold_token;
    Ok(InterventionOutcome {
        pair_id: p.pair.id,
        layer,
        delta_base_prob: dist.prob(base_gold)? - p.base_dist.prob(base_gold)?,
        delta_source_prob: dist.prob(source_gold)? - p.base_dist.prob(source_gold)?,
    })
}

/// Interchange at a single layer.
pub fn run_interchange(
    model: &Model,
    tokenizer: &Tokenizer,
    pair: &InterventionPair,
    layer: usize,
) -> Result<InterventionOutcome> {
    let n = model.n_layers();
    if layer == 0 || layer > n {
        return Err(Error::LayerOutOfRange { layer, n_layers: n });
    }
    let prepared = prepare(model, tokenizer, pair)?;
    patched_outcome(model, &prepared, layer)
}

/// Per-layer means of `per_pair`, in `layers` order.
pub fn layer_means(per_pair: &[InterventionOutcome], layers: &[usize]) -> Vec<LayerEffect> {
    layers
        .iter()
        .map(|&layer| {
            let (mut b, mut s, mut n) = (0.0, 0.0, 0usize);
            for r in per_pair.iter().filter(|r| r.layer == layer) {
                b += r.delta_base_prob;
                s += r.delta_source_prob;
                n += 1;
            }
            let k = n.max(1) as f64;
            LayerEffect {
                layer,
                n_pairs: n,
                delta_base_prob: b / k,
                delta_source_prob: s / k,
            }
        })
        .collect()
}

/// Interchange at every layer in `layers` for every pair. Pairs whose
/// prompts tokenize to different lengths are skipped and reported.
pub fn sweep_layers(
    model: &Model,
    tokenizer: &Tokenizer,
    pairs: &[InterventionPair],
    layers: RangeInclusive<usize>,
) -> Result<SweepResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let n = model.n_layers();
    for layer in [*layers.start(), *layers.end()] {
        if layer == 0 || layer > n {
            return Err(Error::LayerOutOfRange { layer, n_layers: n });
        }
    }
    let prepared: Vec<Result<Prepared>> = pairs
        .par_iter()
        .map(|p| prepare(model, tokenizer, p))
        .collect();
    let mut ready = Vec::new();
    let mut skipped = Vec::new();
    for (pair, prep) in pairs.iter().zip(prepared) {
        match prep {
            Ok(p) => ready.push(p),
            Err(e @ Error::TokenLengthMismatch { .. }) => skipped.push(Skip {
                base_id: pair.id,
                field: pair.field,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e.in_stage("intervene", Some(format!("pair {}", pair.id)))),
        }
    }
    if ready.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let layer_list: Vec<usize> = layers.collect();
    let cells: Vec<(usize, usize)> = (0..ready.len())
        .flat_map(|i| layer_list.iter().map(move |&l| (i, l)))
        .collect();
    let per_pair = cells
        .par_iter()
        .map(|&(i, layer)| {
            patched_outcome(model, &ready[i], layer).map_err(|e| {
                e.in_stage(
                    "intervene",
                    Some(format!("pair {} layer {layer}", ready[i].pair.id)),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means = layer_means(&per_pair, &layer_list);
    Ok(SweepResult {
        means,
        per_pair,
        skipped,
    })
}
