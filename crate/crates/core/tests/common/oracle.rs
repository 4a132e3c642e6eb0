// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force recomputation of every metric from raw records, written
//! without reference to the library's aggregation code.

use std::collections::HashMap;

use arithlens::lens::LensRecord;
use arithlens::model::SiteKind;

pub fn idx(layer: usize, kind: SiteKind) -> usize {
    2 * (layer - 1)
        + if kind == SiteKind::PostAttention {
            0
        } else {
            1
        }
}

pub fn digits_value(tok: &str) -> Option<f64> {
    let body = tok.strip_prefix(' ').unwrap_or(tok);
    if !body.is_empty() && body.chars().all(|c| c.is_ascii_digit()) {
        body.parse().ok()
    } else {
        None
    }
}

/// (mean, q1, median, q3) with numpy-style linear interpolation.
pub fn stats(values: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let i = pos as usize;
        let frac = pos - i as f64;
        if i + 1 < v.len() {
            v[i] * (1.0 - frac) + v[i + 1] * frac
        } else {
            v[i]
        }
    };
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some((mean, q(0.25), q(0.5), q(0.75)))
}

pub type Series = Vec<Option<(f64, f64, f64, f64)>>;

fn per_layer(records: &[LensRecord], f: impl Fn(&LensRecord, usize) -> Option<f64>) -> Series {
    let n_layers = records[0].sites.len() / 2;
    (1..=n_layers)
        .map(|l| {
            let vals: Vec<f64> = records.iter().filter_map(|r| f(r, l)).collect();
            stats(&vals)
        })
        .collect()
}

pub fn mass(records: &[LensRecord], kind: SiteKind) -> Series {
    per_layer(records, |r, l| Some(r.sites[idx(l, kind)].numerical_mass))
}

pub fn proportion(records: &[LensRecord], kind: SiteKind, k: usize) -> Series {
    per_layer(records, |r, l| {
        let top = &r.sites[idx(l, kind)].topk;
        let mut c = 0;
        for t in top.iter().take(k) {
            if digits_value(&t.token).is_some() {
                c += 1;
            }
        }
        Some(c as f64 / k as f64)
    })
}

pub fn abs_error(records: &[LensRecord], kind: SiteKind, k: usize) -> Series {
    per_layer(records, |r, l| {
        let mut total = 0.0;
        let mut c = 0;
        for t in r.sites[idx(l, kind)].topk.iter().take(k) {
            if let Some(v) = digits_value(&t.token) {
                total += (v - r.gold_result as f64).abs();
                c += 1;
            }
        }
        (c > 0).then(|| total / c as f64)
    })
}

pub fn gold_rank(records: &[LensRecord], kind: SiteKind) -> Series {
    per_layer(records, |r, l| {
        Some(r.sites[idx(l, kind)].targets[&r.gold_token].rank as f64)
    })
}

pub fn gold_prob(records: &[LensRecord], kind: SiteKind) -> Series {
    per_layer(records, |r, l| {
        Some(r.sites[idx(l, kind)].targets[&r.gold_token].prob)
    })
}

fn reaches(r: &LensRecord, id: u32) -> Option<usize> {
    let n_layers = r.sites.len() / 2;
    (1..=n_layers).find(|&l| r.sites[idx(l, SiteKind::PostAttention)].targets[&id].rank == 1)
}

/// (per-operand (share, mean first layer)), both, any, exactly-one
pub fn propagation(records: &[LensRecord]) -> (Vec<(f64, Option<f64>)>, f64, f64, f64) {
    let n = records.len() as f64;
    let m = records[0].operand_tokens.len();
    let mut per = vec![(0usize, 0usize); m];
    let (mut all, mut any, mut one) = (0, 0, 0);
    for r in records {
        let mut c = 0;
        for i in 0..m {
            if let Some(l) = reaches(r, r.operand_tokens[i]) {
                per[i].0 += 1;
                per[i].1 += l;
                c += 1;
            }
        }
        all += (c == m) as usize;
        any += (c > 0) as usize;
        one += (c == 1) as usize;
    }
    let per = per
        .into_iter()
        .map(|(cnt, sum)| (cnt as f64 / n, (cnt > 0).then(|| sum as f64 / cnt as f64)))
        .collect();
    (per, all as f64 / n, any as f64 / n, one as f64 / n)
}

/// (layer, token id, mean prob, share)
pub fn frequent(records: &[LensRecord], kind: SiteKind) -> Vec<(usize, u32, f64, f64)> {
    let n_layers = records[0].sites.len() / 2;
    let mut out = vec![];
    for l in 1..=n_layers {
        let mut ids: Vec<u32> = records
            .iter()
            .map(|r| r.sites[idx(l, kind)].topk[0].id)
            .collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            let probs: Vec<f64> = records
                .iter()
                .map(|r| &r.sites[idx(l, kind)].topk[0])
                .filter(|t| t.id == id)
                .map(|t| t.prob)
                .collect();
            let share = probs.len() as f64 / records.len() as f64;
            let mean = probs.iter().sum::<f64>() / probs.len() as f64;
            if share > 0.8 && mean > 0.5 {
                out.push((l, id, mean, share));
            }
        }
    }
    out
}

/// overall insufficient share, per dataset (insufficient, op shares)
pub fn sufficiency(records: &[LensRecord]) -> (f64, HashMap<String, (f64, Vec<f64>)>) {
    let insufficient = |r: &LensRecord| {
        r.operand_tokens
            .iter()
            .filter(|&&id| reaches(r, id).is_some())
            .count()
            < 2
    };
    let overall = records.iter().filter(|r| insufficient(r)).count() as f64 / records.len() as f64;
    let mut per = HashMap::new();
    let mut names: Vec<&String> = records.iter().map(|r| &r.dataset).collect();
    names.sort();
    names.dedup();
    for name in names {
        let group: Vec<&LensRecord> = records.iter().filter(|r| &r.dataset == name).collect();
        let n = group.len() as f64;
        let ins = group.iter().filter(|r| insufficient(r)).count() as f64 / n;
        let ops = (0..2)
            .map(|i| {
                group
                    .iter()
                    .filter(|r| reaches(r, r.operator_tokens[i]).is_some())
                    .count() as f64
                    / n
            })
            .collect();
        per.insert(name.clone(), (ins, ops));
    }
    (overall, per)
}

pub fn accuracy(records: &[LensRecord]) -> f64 {
    records
        .iter()
        .filter(|r| r.final_summary.predicted == r.gold_token)
        .count() as f64
        / records.len() as f64
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    if (a - b).abs() <= 1e-9 {
        Ok(())
    } else {
        Err(format!("{what}: module {a} vs oracle {b}"))
    }
}

fn compare_series(
    got: &arithlens::metrics::LayerSeries,
    want: &Series,
    what: &str,
) -> Result<(), String> {
    if got.layers.len() != want.len() {
        return Err(format!(
            "{what}: {} layers vs {}",
            got.layers.len(),
            want.len()
        ));
    }
    for (s, w) in got.layers.iter().zip(want) {
        let at = format!("{what} layer {}", s.layer);
        match (s.mean, w) {
            (None, None) => {}
            (Some(m), Some((wm, q1, med, q3))) => {
                close(m, *wm, &at)?;
                close(s.q1.unwrap(), *q1, &at)?;
                close(s.median.unwrap(), *med, &at)?;
                close(s.q3.unwrap(), *q3, &at)?;
            }
            _ => return Err(format!("{at}: null mismatch")),
        }
    }
    Ok(())
}

/// Check all eight metric operations against the brute-force oracle.
/// `truth_mass` optionally supplies per-kind numerical-mass series computed
/// from full distributions.
pub fn verify_all(
    records: &[LensRecord],
    truth_mass: Option<&[(SiteKind, Series)]>,
) -> Result<(), String> {
    use arithlens::metrics as m;
    let e = |x: arithlens::Error| x.to_string();
    for kind in SiteKind::ALL {
        let k = kind.as_str();
        let got = m::numerical_mass_series(records, kind).map_err(e)?;
        compare_series(&got, &mass(records, kind), &format!("mass {k}"))?;
        if let Some(truth) = truth_mass {
            let t = &truth.iter().find(|(tk, _)| *tk == kind).unwrap().1;
            compare_series(&got, t, &format!("mass from distributions {k}"))?;
        }
        for topk in [1, 10] {
            let got = m::topk_numerical_proportion(records, kind, topk).map_err(e)?;
            compare_series(
                &got,
                &proportion(records, kind, topk),
                &format!("proportion@{topk} {k}"),
            )?;
            let got = m::absolute_error_series(records, kind, topk).map_err(e)?;
            compare_series(
                &got,
                &abs_error(records, kind, topk),
                &format!("abs error@{topk} {k}"),
            )?;
            if got.layers.iter().any(|s| s.q1.is_some_and(|v| v < 0.0)) {
                return Err("negative absolute error".into());
            }
        }
        let (rank, prob) = m::target_trajectory(records, kind).map_err(e)?;
        compare_series(&rank, &gold_rank(records, kind), &format!("gold rank {k}"))?;
        compare_series(&prob, &gold_prob(records, kind), &format!("gold prob {k}"))?;

        let got = m::frequent_token_table(records, kind).map_err(e)?;
        let want = frequent(records, kind);
        if got.len() != want.len() {
            return Err(format!(
                "frequent {k}: {} entries vs {}",
                got.len(),
                want.len()
            ));
        }
        for (g, w) in got.iter().zip(&want) {
            if (g.layer, g.token_id) != (w.0, w.1) {
                return Err(format!(
                    "frequent {k}: entry {:?} vs {:?}",
                    (g.layer, g.token_id),
                    w
                ));
            }
            close(g.mean_probability, w.2, "frequent mean")?;
            close(g.frequency_share, w.3, "frequent share")?;
        }
    }

    let got = m::operand_propagation_stats(records).map_err(e)?;
    let (per, both, any, one) = propagation(records);
    for (g, (share, layer)) in got.operands.iter().zip(&per) {
        close(g.share, *share, "operand share")?;
        match (g.mean_first_layer, layer) {
            (None, None) => {}
            (Some(a), Some(b)) => close(a, *b, "operand mean layer")?,
            _ => return Err("operand mean layer null mismatch".into()),
        }
    }
    close(got.both_share, both, "both share")?;
    close(got.any_share, any, "any share")?;
    close(got.mutual_exclusivity_share, one, "exclusivity")?;

    if records.iter().all(|r| r.operand_tokens.len() == 3) {
        let got = m::operand_sufficiency(records).map_err(e)?;
        let (overall, per) = sufficiency(records);
        close(got.insufficient_share, overall, "insufficient share")?;
        if got.per_dataset.len() != per.len() {
            return Err("sufficiency dataset count".into());
        }
        for d in &got.per_dataset {
            let (ins, ops) = &per[&d.dataset];
            close(d.insufficient_share, *ins, "dataset insufficient share")?;
            for (a, b) in d.operator_shares.iter().zip(ops) {
                close(*a, *b, "operator share")?;
            }
            if d.operator_pair_propagated != ops.iter().all(|&s| s > 0.5) {
                return Err("operator majority flag".into());
            }
        }
    }

    close(
        m::accuracy(records).map_err(e)?,
        accuracy(records),
        "accuracy",
    )?;
    Ok(())
}
