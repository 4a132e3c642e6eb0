// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise aggregates over a corpus of [`LensRecord`]s.
//!
//! Every function sorts the corpus by `(dataset, query_id)` before reducing,
//! so permuting the input never changes an output bit. Layers with no
//! qualifying samples report `None` rather than zero.
//!
//! | function | figure quantity |
//! |---|---|
//! | [`numerical_mass_series`] | probability mass on numerical tokens |
//! | [`topk_numerical_proportion`] | share of numerical tokens in the top-k |
//! | [`absolute_error_series`] | distance of top-k numerals to the gold result |
//! | [`target_trajectory`] | rank and probability of the gold token |
//! | [`operand_propagation_stats`] | operands reaching rank 1 post-ATT |
//! | [`frequent_token_table`] | tokens that are top-1 in most queries |
//! | [`operand_sufficiency`] | 3-operand propagation shortfall |
//! | [`accuracy`] | final next-token accuracy |

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{IntermediatePrediction, LensRecord};
use crate::model::{SiteKind, TapSite, TokenId};
use crate::tokenizer::classify;

/// Top-1 share a token must exceed to enter the frequent-token table.
pub const FREQUENT_SHARE: f64 = 0.8;
/// Mean probability a frequent token must exceed.
pub const FREQUENT_PROB: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub count: usize,
    pub mean: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSeries {
    pub kind: SiteKind,
    pub layers: Vec<LayerStat>,
}

impl LayerSeries {
    pub fn means(&self) -> Vec<Option<f64>> {
        self.layers.iter().map(|s| s.mean).collect()
    }
}

/// Quantile by linear interpolation between closest ranks of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(layer: usize, values: &[f64]) -> LayerStat {
    if values.is_empty() {
        return LayerStat {
            layer,
            count: 0,
            mean: None,
            q1: None,
            median: None,
            q3: None,
        };
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    LayerStat {
        layer,
        count: values.len(),
        mean: Some(mean),
        q1: Some(quantile(&sorted, 0.25)),
        median: Some(quantile(&sorted, 0.5)),
        q3: Some(quantile(&sorted, 0.75)),
    }
}

fn canonical(records: &[LensRecord]) -> Result<(Vec<&LensRecord>, usize)> {
    let first = records.first().ok_or(Error::EmptyCorpus)?;
    let n_layers = first.n_layers();
    if let Some(bad) = records
        .iter()
        .find(|r| r.n_layers() != n_layers || r.sites.len() % 2 != 0)
    {
        return Err(Error::InvalidQuery(format!(
            "record {}#{} has {} sites, expected {}",
            bad.dataset,
            bad.query_id,
            bad.sites.len(),
            2 * n_layers
        )));
    }
    let mut sorted: Vec<&LensRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.dataset, a.query_id).cmp(&(&b.dataset, b.query_id)));
    Ok((sorted, n_layers))
}

fn site(layer: usize, kind: SiteKind) -> TapSite {
    TapSite { layer, kind }
}

/// Per-record, per-layer value (or `None` if the record does not qualify),
/// reduced to a [`LayerSeries`].
fn series<F>(records: &[LensRecord], kind: SiteKind, value: F) -> Result<LayerSeries>
where
    F: Fn(&LensRecord, &IntermediatePrediction) -> Result<Option<f64>> + Sync,
{
    let (sorted, n_layers) = canonical(records)?;
    let rows = sorted
        .par_iter()
        .map(|r| {
            (1..=n_layers)
                .map(|l| value(r, r.site(site(l, kind))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let layers = (0..n_layers)
        .map(|i| {
            let vals: Vec<f64> = rows.iter().filter_map(|row| row[i]).collect();
            summarize(i + 1, &vals)
        })
        .collect();
    Ok(LayerSeries { kind, layers })
}

/// Integer value of a decoded token if it is numerical.
fn numeral(token: &str) -> Option<f64> {
    let (numerical, _) = classify(token.as_bytes());
    if !numerical {
        return None;
    }
    token.trim_start_matches(' ').parse::<f64>().ok()
}

fn require_k(records: &[LensRecord], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidQuery("k must be at least 1".into()));
    }
    for r in records {
        for s in &r.sites {
            if s.topk.len() < k {
                return Err(Error::TopkTooShort {
                    k,
                    stored: s.topk.len(),
                });
            }
        }
    }
    Ok(())
}

pub fn numerical_mass_series(records: &[LensRecord], kind: SiteKind) -> Result<LayerSeries> {
    series(records, kind, |_, p| Ok(Some(p.numerical_mass)))
}

/// Mean over queries of (numerical tokens among the top-k) / k.
pub fn topk_numerical_proportion(
    records: &[LensRecord],
    kind: SiteKind,
    k: usize,
) -> Result<LayerSeries> {
    require_k(records, k)?;
    series(records, kind, |_, p| {
        let hits = p.topk[..k]
            .iter()
            .filter(|t| numeral(&t.token).is_some())
            .count();
        Ok(Some(hits as f64 / k as f64))
    })
}

/// Per query: mean |value − gold| over numerical tokens in the top-k;
/// queries without any numerical token in the top-k do not contribute.
pub fn absolute_error_series(
    records: &[LensRecord],
    kind: SiteKind,
    k: usize,
) -> Result<LayerSeries> {
    require_k(records, k)?;
    series(records, kind, |r, p| {
        let errors: Vec<f64> = p.topk[..k]
            .iter()
            .filter_map(|t| numeral(&t.token))
            .map(|v| (v - r.gold_result as f64).abs())
            .collect();
        Ok(if errors.is_empty() {
            None
        } else {
            Some(errors.iter().sum::<f64>() / errors.len() as f64)
        })
    })
}

/// Gold-token rank series and probability series.
pub fn target_trajectory(
    records: &[LensRecord],
    kind: SiteKind,
) -> Result<(LayerSeries, LayerSeries)> {
    let rank = series(records, kind, |r, p| {
        hit(r, p, r.gold_token).map(|(rank, _)| Some(rank as f64))
    })?;
    let prob = series(records, kind, |r, p| {
        hit(r, p, r.gold_token).map(|(_, prob)| Some(prob))
    })?;
    Ok((rank, prob))
}

fn hit(r: &LensRecord, p: &IntermediatePrediction, id: TokenId) -> Result<(usize, f64)> {
    p.targets.get(&id).map(|h| (h.rank, h.prob)).ok_or_else(|| {
        Error::MissingTarget(format!(
            "token {id} at layer {} {} of {}#{}",
            p.site.layer, p.site.kind, r.dataset, r.query_id
        ))
    })
}

/// First layer at which `id` is rank 1 at a post-ATT site.
fn first_rank_one(r: &LensRecord, id: TokenId) -> Result<Option<usize>> {
    for layer in 1..=r.n_layers() {
        let p = r.site(site(layer, SiteKind::PostAttention));
        if hit(r, p, id)?.0 == 1 {
            return Ok(Some(layer));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperandPropagation {
    /// 1-based operand position.
    pub operand: usize,
    /// Share of queries where the operand is rank 1 at some post-ATT site.
    pub share: f64,
    /// Mean over those queries of the first such layer.
    pub mean_first_layer: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationStats {
    pub n_queries: usize,
    pub operands: Vec<OperandPropagation>,
    /// Every operand reaches rank 1 somewhere.
    pub both_share: f64,
    /// At least one operand reaches rank 1 somewhere.
    pub any_share: f64,
    /// Exactly one operand reaches rank 1, over all queries.
    pub mutual_exclusivity_share: f64,
    /// Exactly one operand reaches rank 1, over queries where any does.
    pub exclusivity_among_propagated: Option<f64>,
}

pub fn operand_propagation_stats(records: &[LensRecord]) -> Result<PropagationStats> {
    let (sorted, _) = canonical(records)?;
    let n_operands = sorted[0].operands.len();
    if let Some(bad) = sorted.iter().find(|r| r.operand_tokens.len() != n_operands) {
        return Err(Error::WrongArity {
            expected: n_operands,
            got: bad.operand_tokens.len(),
        });
    }
    let firsts = sorted
        .par_iter()
        .map(|r| {
            r.operand_tokens
                .iter()
                .map(|&id| first_rank_one(r, id))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = firsts.len() as f64;
    let operands = (0..n_operands)
        .map(|i| {
            let layers: Vec<f64> = firsts
                .iter()
                .filter_map(|f| f[i])
                .map(|l| l as f64)
                .collect();
            OperandPropagation {
                operand: i + 1,
                share: layers.len() as f64 / n,
                mean_first_layer: (!layers.is_empty())
                    .then(|| layers.iter().sum::<f64>() / layers.len() as f64),
                count: layers.len(),
            }
        })
        .collect();
    let reached: Vec<usize> = firsts.iter().map(|f| f.iter().flatten().count()).collect();
    let all = reached.iter().filter(|&&c| c == n_operands).count();
    let any = reached.iter().filter(|&&c| c > 0).count();
    let exactly_one = reached.iter().filter(|&&c| c == 1).count();
    Ok(PropagationStats {
        n_queries: firsts.len(),
        operands,
        both_share: all as f64 / n,
        any_share: any as f64 / n,
        mutual_exclusivity_share: exactly_one as f64 / n,
        exclusivity_among_propagated: (any > 0).then(|| exactly_one as f64 / any as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequentTokenEntry {
    pub layer: usize,
    pub site: SiteKind,
    pub token_id: TokenId,
    pub token: String,
    /// Mean top-1 probability over the queries where it is top-1.
    pub mean_probability: f64,
    /// Share of queries where it is top-1.
    pub frequency_share: f64,
}

/// Tokens that are top-1 in more than 80% of queries at a site with mean
/// probability above 0.5 over those queries.
pub fn frequent_token_table(
    records: &[LensRecord],
    kind: SiteKind,
) -> Result<Vec<FrequentTokenEntry>> {
    require_k(records, 1)?;
    let (sorted, n_layers) = canonical(records)?;
    let n = sorted.len() as f64;
    let mut out = Vec::new();
    for layer in 1..=n_layers {
        // id -> (count, prob sum, token text)
        let mut tally: BTreeMap<TokenId, (usize, f64, &str)> = BTreeMap::new();
        for r in &sorted {
            let top = &r.site(site(layer, kind)).topk[0];
            let e = tally.entry(top.id).or_insert((0, 0.0, &top.token));
            e.0 += 1;
            e.1 += top.prob;
        }
        for (id, (count, sum, token)) in tally {
            let share = count as f64 / n;
            let mean = sum / count as f64;
            if share > FREQUENT_SHARE && mean > FREQUENT_PROB {
                out.push(FrequentTokenEntry {
                    layer,
                    site: kind,
                    token_id: id,
                    token: token.to_string(),
                    mean_probability: mean,
                    frequency_share: share,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSufficiency {
    pub dataset: String,
    pub n_queries: usize,
    pub insufficient_share: f64,
    /// Per operator position: share of queries where its token is rank 1 at
    /// some post-ATT site.
    pub operator_shares: Vec<f64>,
    /// Every operator reaches rank 1 in a majority of queries.
    pub operator_pair_propagated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub n_queries: usize,
    /// Fewer than two operands ever reach rank 1 post-ATT.
    pub insufficient_share: f64,
    pub per_dataset: Vec<DatasetSufficiency>,
}

pub fn operand_sufficiency(records: &[LensRecord]) -> Result<SufficiencyReport> {
    let (sorted, _) = canonical(records)?;
    if let Some(bad) = sorted
        .iter()
        .find(|r| r.operand_tokens.len() != 3 || r.operator_tokens.len() != 2)
    {
        return Err(Error::WrongArity {
            expected: 3,
            got: bad.operand_tokens.len(),
        });
    }
    // (dataset, insufficient, operator reached flags)
    let rows = sorted
        .par_iter()
        .map(|r| {
            let operands = r
                .operand_tokens
                .iter()
                .map(|&id| first_rank_one(r, id).map(|f| f.is_some()))
                .collect::<Result<Vec<_>>>()?;
            let operators = r
                .operator_tokens
                .iter()
                .map(|&id| first_rank_one(r, id).map(|f| f.is_some()))
                .collect::<Result<Vec<_>>>()?;
            let reached = operands.iter().filter(|&&b| b).count();
            Ok((r.dataset.as_str(), reached < 2, operators))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<&str, Vec<&(&str, bool, Vec<bool>)>> = BTreeMap::new();
    for row in &rows {
        groups.entry(row.0).or_default().push(row);
    }
    let per_dataset = groups
        .into_iter()
        .map(|(dataset, rows)| {
            let n = rows.len() as f64;
            let insufficient = rows.iter().filter(|r| r.1).count() as f64 / n;
            let operator_shares: Vec<f64> = (0..2)
                .map(|i| rows.iter().filter(|r| r.2[i]).count() as f64 / n)
                .collect();
            DatasetSufficiency {
                dataset: dataset.to_string(),
                n_queries: rows.len(),
                insufficient_share: insufficient,
                operator_pair_propagated: operator_shares.iter().all(|&s| s > 0.5),
                operator_shares,
            }
        })
        .collect();
    Ok(SufficiencyReport {
        n_queries: rows.len(),
        insufficient_share: rows.iter().filter(|r| r.1).count() as f64 / rows.len() as f64,
        per_dataset,
    })
}

/// Share of records whose greedy next token is the gold token.
pub fn accuracy(records: &[LensRecord]) -> Result<f64> {
    let (sorted, _) = canonical(records)?;
    let hits = sorted
        .iter()
        .filter(|r| r.final_summary.predicted == r.gold_token)
        .count();
    Ok(hits as f64 / sorted.len() as f64)
}

/// Pearson correlation over positions where both series have a value.
pub fn pearson(a: &[Option<f64>], b: &[Option<f64>]) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
