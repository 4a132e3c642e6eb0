// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built lens records.

use std::collections::BTreeMap;

use arithlens::dataset::Operator;
use arithlens::lens::{FinalSummary, IntermediatePrediction, LensRecord, TargetHit, TopToken};
use arithlens::model::{SiteKind, TapSite, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic id for the number `n`.
pub fn num_id(n: u64) -> TokenId {
    10_000 + n as TokenId
}

pub const PLUS: TokenId = 1;
pub const MINUS: TokenId = 2;

pub fn op_id(op: Operator) -> TokenId {
    match op {
        Operator::Add => PLUS,
        Operator::Sub => MINUS,
    }
}

pub fn top(id: TokenId, token: &str, prob: f64) -> TopToken {
    TopToken {
        id,
        token: token.to_string(),
        prob,
    }
}

pub fn num(n: u64, prob: f64) -> TopToken {
    top(num_id(n), &format!(" {n}"), prob)
}

/// Record skeleton: every site gets the filler top-k, mass 0 and rank 1000
/// for all targets; callers then edit sites.
pub fn record(
    dataset: &str,
    id: usize,
    operands: &[u64],
    operators: &[Operator],
    gold: u64,
    n_layers: usize,
) -> LensRecord {
    let operand_tokens: Vec<TokenId> = operands.iter().map(|&n| num_id(n)).collect();
    let operator_tokens: Vec<TokenId> = operators.iter().map(|&o| op_id(o)).collect();
    let mut targets = BTreeMap::new();
    for &t in operand_tokens
        .iter()
        .chain(&operator_tokens)
        .chain([num_id(gold)].iter())
    {
        targets.insert(
            t,
            TargetHit {
                rank: 1000,
                prob: 1e-4,
            },
        );
    }
    let filler: Vec<TopToken> = (0..10)
        .map(|i| top(100 + i, &format!("w{i}"), 0.05))
        .collect();
    let sites = (1..=n_layers)
        .flat_map(|layer| {
            SiteKind::ALL.map(|kind| IntermediatePrediction {
                site: TapSite { layer, kind },
                topk: filler.clone(),
                targets: targets.clone(),
                numerical_mass: 0.0,
            })
        })
        .collect();
    LensRecord {
        dataset: dataset.to_string(),
        query_id: id,
        prompt: String::new(),
        prompt_tokens: vec![],
        operands: operands.to_vec(),
        operators: operators.to_vec(),
        gold_result: gold,
        gold_token: num_id(gold),
        operand_tokens,
        operator_tokens,
        sites,
        final_summary: FinalSummary {
            topk: filler,
            predicted: 100,
            gold_rank: 1000,
            gold_prob: 1e-4,
            correct: false,
        },
    }
}

pub fn site_mut(r: &mut LensRecord, layer: usize, kind: SiteKind) -> &mut IntermediatePrediction {
    &mut r.sites[2 * (layer - 1) + kind as usize]
}

/// Mark `id` as rank 1 at a post-ATT site.
pub fn make_rank_one(r: &mut LensRecord, layer: usize, id: TokenId) {
    let s = site_mut(r, layer, SiteKind::PostAttention);
    s.targets.insert(id, TargetHit { rank: 1, prob: 0.6 });
}

/// Random corpus with numerals, ties, rank-1 hits and varied arity.
pub fn random_corpus(seed: u64, n: usize, n_layers: usize, n_operands: usize) -> Vec<LensRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = [Operator::Add, Operator::Sub];
    let datasets = ["add_sub_large", "sub_add_large"];
    (0..n)
        .map(|i| {
            let operands: Vec<u64> = (0..n_operands).map(|_| rng.gen_range(0..60)).collect();
            let operators: Vec<Operator> =
                (1..n_operands).map(|_| ops[rng.gen_range(0..2)]).collect();
            let gold = rng.gen_range(0..120);
            let dataset = datasets[rng.gen_range(0..2)];
            let mut r = record(dataset, i, &operands, &operators, gold, n_layers);
            let ids: Vec<TokenId> = r.sites[0].targets.keys().copied().collect();
            for s in &mut r.sites {
                let mut probs: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..0.1)).collect();
                probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if rng.gen_bool(0.3) {
                    probs[0] = rng.gen_range(0.5..0.99);
                }
                s.topk = probs
                    .iter()
                    .map(|&p| match rng.gen_range(0..4) {
                        0 => num(rng.gen_range(0..200), p),
                        1 => top(PLUS, " +", p),
                        _ => {
                            let w = rng.gen_range(0..3u32);
                            top(200 + w, &format!("tok{w}"), p)
                        }
                    })
                    .collect();
                s.numerical_mass = rng.gen_range(0.0..1.0);
                for &id in &ids {
                    let rank = if rng.gen_bool(0.15) {
                        1
                    } else {
                        rng.gen_range(2..5000)
                    };
                    s.targets.insert(
                        id,
                        arithlens::lens::TargetHit {
                            rank,
                            prob: rng.gen_range(0.0..1.0),
                        },
                    );
                }
            }
            if rng.gen_bool(0.25) {
                r.final_summary.predicted = r.gold_token;
            }
            r
        })
        .collect()
}
