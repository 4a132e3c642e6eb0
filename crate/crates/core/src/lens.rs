// SPDX-License-Identifier: MIT OR Apache-2.0

//! Early decoding of residual-stream taps.
//!
//! Every tap goes through the model's final normalization and LM head, then
//! a softmax computed in `f64`. Applying the final norm at every layer makes
//! the last post-MLP tap decode to exactly the model's own output
//! distribution.
//!
//! Ranks are 1-based with ties broken by ascending token id, so a uniform
//! distribution ranks token `i` at `i + 1`.
//!
//! Layer numbering starts at the first block; the embedding output is not a
//! site.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ArithmeticQuery, Dataset, Operator};
use crate::error::{Error, Result};
use crate::model::{Model, TapSite, TokenId};
use crate::tokenizer::Tokenizer;

pub const DEFAULT_K: usize = 10;
pub const LENS_FORMAT: &str = "arithlens.lens.v1";

/// A next-token distribution over the full vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Softmax in `f64`.
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptyInput);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut probs: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Ok(Self { probs })
    }

    /// Wrap explicit probabilities; they must be finite, nonnegative and sum
    /// to 1 within 1e-6.
    pub fn from_probabilities(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite("probabilities".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidQuery(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, id: TokenId) -> Result<f64> {
        self.probs
            .get(id as usize)
            .copied()
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.probs.len(),
            })
    }

    /// `(rank, probability)` of `id`.
    pub fn rank_and_prob(&self, id: TokenId) -> Result<(usize, f64)> {
        let p = self.prob(id)?;
        let i = id as usize;
        let above = self
            .probs
            .iter()
            .enumerate()
            .filter(|&(j, &q)| q > p || (q == p && j < i))
            .count();
        Ok((above + 1, p))
    }

    /// The `k` most probable tokens, by descending probability then id.
    pub fn top_k(&self, k: usize) -> Vec<(TokenId, f64)> {
        let k = k.min(self.probs.len());
        if k == 0 {
            return Vec::new();
        }
        let order = |&a: &usize, &b: &usize| {
            self.probs[b]
                .partial_cmp(&self.probs[a])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        };
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, order);
            idx.truncate(k);
        }
        idx.sort_by(order);
        idx.into_iter()
            .map(|i| (i as TokenId, self.probs[i]))
            .collect()
    }

    /// Total probability on tokens where `mask` is set.
    pub fn mass(&self, mask: &[bool]) -> f64 {
        self.probs
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p)
            .sum()
    }
}

/// `softmax(lm_head(final_norm(vector)))`.
pub fn de_embed(vector: &[f32], model: &Model) -> Result<Distribution> {
    Distribution::from_logits(&model.unembed(vector)?)
}

pub fn rank_and_prob(distribution: &Distribution, id: TokenId) -> Result<(usize, f64)> {
    distribution.rank_and_prob(id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopToken {
    pub id: TokenId,
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetHit {
    pub rank: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediatePrediction {
    pub site: TapSite,
    pub topk: Vec<TopToken>,
    /// Keyed by token id.
    pub targets: BTreeMap<TokenId, TargetHit>,
    /// Probability mass on numerical tokens.
    pub numerical_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub topk: Vec<TopToken>,
    pub predicted: TokenId,
    pub gold_rank: usize,
    pub gold_prob: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensRecord {
    pub dataset: String,
    pub query_id: usize,
    pub prompt: String,
    pub prompt_tokens: Vec<TokenId>,
    pub operands: Vec<u64>,
    pub operators: Vec<Operator>,
    pub gold_result: u64,
    pub gold_token: TokenId,
    pub operand_tokens: Vec<TokenId>,
    pub operator_tokens: Vec<TokenId>,
    /// Layer-major, post-ATT before post-MLP.
    pub sites: Vec<IntermediatePrediction>,
    #[serde(rename = "final")]
    pub final_summary: FinalSummary,
}

impl LensRecord {
    pub fn n_layers(&self) -> usize {
        self.sites.len() / 2
    }

    pub fn site(&self, site: TapSite) -> &IntermediatePrediction {
        let kind = site.kind as usize;
        &self.sites[2 * (site.layer - 1) + kind]
    }

    pub fn target(&self, site: TapSite, id: TokenId) -> Result<TargetHit> {
        self.site(site)
            .targets
            .get(&id)
            .copied()
            .ok_or_else(|| Error::MissingTarget(format!("token {id} at {site:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub k: usize,
    /// Tracked in addition to the gold, operand and operator tokens.
    pub extra_targets: Vec<TokenId>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            extra_targets: Vec::new(),
        }
    }
}

fn top_tokens(dist: &Distribution, k: usize, tokenizer: &Tokenizer) -> Result<Vec<TopToken>> {
    dist.top_k(k)
        .into_iter()
        .map(|(id, prob)| {
            Ok(TopToken {
                id,
                token: tokenizer.decode(&[id])?,
                prob,
            })
        })
        .collect()
}

/// One forward pass with every tap de-embedded. Returns the record and the
/// full per-site distributions (same order as `record.sites`).
pub fn lens_sweep_full(
    model: &Model,
    tokenizer: &Tokenizer,
    query: &ArithmeticQuery,
    options: &SweepOptions,
) -> Result<(LensRecord, Vec<Distribution>)> {
    if options.k == 0 {
        return Err(Error::InvalidQuery("k must be at least 1".into()));
    }
    if tokenizer.vocab_size() > model.vocab_size() {
        return Err(Error::VocabMismatch(format!(
            "tokenizer has {} tokens, model only {}",
            tokenizer.vocab_size(),
            model.vocab_size()
        )));
    }
    let prompt_tokens = tokenizer.encode(&query.prompt)?;
    let operand_tokens = query
        .operands
        .iter()
        .map(|&n| {
            tokenizer
                .integer_token(n, true)
                .ok_or_else(|| Error::InvalidQuery(format!("operand {n} is not a single token")))
        })
        .collect::<Result<Vec<_>>>()?;
    let operator_tokens = query
        .operators
        .iter()
        .map(|op| match tokenizer.encode(&format!(" {op}"))?.as_slice() {
            [id] => Ok(*id),
            _ => Err(Error::InvalidQuery(format!(
                "operator {op} is not a single token"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut targets: Vec<TokenId> = vec![query.gold_token];
    targets.extend(&operand_tokens);
    targets.extend(&operator_tokens);
    targets.extend(&options.extra_targets);
    targets.sort_unstable();
    targets.dedup();

    let position = prompt_tokens
        .len()
        .checked_sub(1)
        .ok_or(Error::EmptyInput)?;
    let taps = model.forward_with_taps(&prompt_tokens, position)?;
    let mask = tokenizer.numerical_mask();

    let mut sites = Vec::with_capacity(2 * taps.n_layers());
    let mut dists = Vec::with_capacity(2 * taps.n_layers());
    for (site, vector) in taps.taps() {
        let dist = de_embed(vector, model)?;
        let hits = targets
            .iter()
            .map(|&id| {
                let (rank, prob) = dist.rank_and_prob(id)?;
                Ok((id, TargetHit { rank, prob }))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        sites.push(IntermediatePrediction {
            site,
            topk: top_tokens(&dist, options.k, tokenizer)?,
            targets: hits,
            numerical_mass: dist.mass(mask),
        });
        dists.push(dist);
    }

    let output = Distribution::from_logits(&taps.final_logits)?;
    let (gold_rank, gold_prob) = output.rank_and_prob(query.gold_token)?;
    let topk = top_tokens(&output, options.k, tokenizer)?;
    let predicted = topk[0].id;
    let record = LensRecord {
        dataset: String::new(),
        query_id: query.id,
        prompt: query.prompt.clone(),
        prompt_tokens,
        operands: query.operands.clone(),
        operators: query.operators.clone(),
        gold_result: query.gold_result,
        gold_token: query.gold_token,
        operand_tokens,
        operator_tokens,
        sites,
        final_summary: FinalSummary {
            topk,
            predicted,
            gold_rank,
            gold_prob,
            correct: predicted == query.gold_token,
        },
    };
    Ok((record, dists))
}

pub fn lens_sweep(
    model: &Model,
    tokenizer: &Tokenizer,
    query: &ArithmeticQuery,
    options: &SweepOptions,
) -> Result<LensRecord> {
    lens_sweep_full(model, tokenizer, query, options).map(|(record, _)| record)
}

/// Sweep every query of a dataset in parallel; records come back in query
/// order.
pub fn sweep_dataset(
    model: &Model,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    options: &SweepOptions,
) -> Result<Vec<LensRecord>> {
    let name = dataset.name();
    dataset
        .queries
        .par_iter()
        .map(|q| {
            let mut record = lens_sweep(model, tokenizer, q, options)
                .map_err(|e| e.in_stage("lens", Some(format!("{name}#{}", q.id))))?;
            record.dataset = name.clone();
            Ok(record)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensHeader {
    pub format: String,
    pub model: String,
    pub dataset: String,
    pub k: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub extra_targets: Vec<TokenId>,
}

pub fn write_records<W: Write>(
    mut out: W,
    header: &LensHeader,
    records: &[LensRecord],
) -> Result<()> {
    let ctx = "lens jsonl";
    let line = serde_json::to_string(header).map_err(|e| Error::json(ctx, e))?;
    writeln!(out, "{line}").map_err(|e| Error::io(ctx, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(ctx, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(ctx, e))?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<(LensHeader, Vec<LensRecord>)> {
    let ctx = "lens jsonl";
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or(Error::EmptyCorpus)?
        .map_err(|e| Error::io(ctx, e))?;
    let header: LensHeader = serde_json::from_str(&first).map_err(|e| Error::json(ctx, e))?;
    if header.format != LENS_FORMAT {
        return Err(Error::InvalidQuery(format!(
            "unknown lens format {}",
            header.format
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(ctx, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(|e| Error::json(ctx, e))?);
        }
    }
    Ok((header, records))
}

pub fn load_records(path: &Path) -> Result<(LensHeader, Vec<LensRecord>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ranks_follow_ids() {
        let d = Distribution::from_probabilities(vec![0.125; 8]).unwrap();
        assert_eq!(d.rank_and_prob(5).unwrap(), (6, 0.125));
        assert_eq!(d.rank_and_prob(0).unwrap().0, 1);
        assert_eq!(d.top_k(3), vec![(0, 0.125), (1, 0.125), (2, 0.125)]);
        assert!(d.rank_and_prob(8).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_rejects_nan() {
        let d = Distribution::from_logits(&[1.0, 2.0, 3.0, -50.0]).unwrap();
        let s: f64 = d.probs().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(d.top_k(1)[0].0, 2);
        assert!(Distribution::from_logits(&[1.0, f32::NAN]).is_err());
        assert!(Distribution::from_logits(&[]).is_err());
    }

    #[test]
    fn top_k_longer_than_vocab_is_clamped() {
        let d = Distribution::from_logits(&[0.0, 1.0]).unwrap();
        let top = d.top_k(10);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].0, 1);
    }

    #[test]
    fn mass_over_mask() {
        let d = Distribution::from_probabilities(vec![0.5, 0.25, 0.25]).unwrap();
        assert_eq!(d.mass(&[true, false, true]), 0.75);
    }
}
