// SPDX-License-Identifier: MIT OR Apache-2.0

//! Controlled arithmetic query sets.
//!
//! Queries look like `Please calculate 306 + 136 =`. Every operand and the
//! left-to-right result must be an integer in `[0, bound]` whose
//! space-prefixed rendering is a single token of the loaded vocabulary, so
//! each number occupies exactly one prompt position and the gold answer is a
//! single next token. `small` datasets use bound 99, `large` ones 520.
//!
//! Sampling is uniform without replacement over the valid tuple space, driven
//! by ChaCha8 (`rand_chacha` 0.3) seeded with `seed_from_u64(spec.seed)`.
//! Two-operand spaces and three-operand spaces of at most
//! [`ENUMERATION_LIMIT`] tuples are enumerated in lexicographic order and
//! partially Fisher-Yates shuffled; larger spaces use rejection sampling from
//! uniform draws over the valid value set.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenId};
use crate::tokenizer::Tokenizer;

pub const ENUMERATION_LIMIT: u64 = 2_000_000;
pub const DATASET_FORMAT: &str = "arithlens.dataset.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
}

impl Operator {
    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Add => "add",
            Operator::Sub => "sub",
        }
    }

    pub fn apply(self, lhs: i64, rhs: i64) -> i64 {
        match self {
            Operator::Add => lhs + rhs,
            Operator::Sub => lhs - rhs,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Operator::Add => Operator::Sub,
            Operator::Sub => Operator::Add,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn bound(self) -> u64 {
        match self {
            SizeClass::Small => 99,
            SizeClass::Large => 520,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub operators: Vec<Operator>,
    pub size_class: SizeClass,
    pub n_operands: usize,
    pub count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(operators: Vec<Operator>, size_class: SizeClass, count: usize, seed: u64) -> Self {
        Self {
            n_operands: operators.len() + 1,
            operators,
            size_class,
            count,
            seed,
        }
    }

    /// `add_large`, `sub_small`, `add_sub_large`, ...
    pub fn name(&self) -> String {
        let ops: Vec<&str> = self.operators.iter().map(|o| o.name()).collect();
        format!("{}_{}", ops.join("_"), self.size_class.name())
    }

    fn check(&self) -> Result<()> {
        let ok_arity = matches!(self.n_operands, 2 | 3);
        if !ok_arity || self.operators.len() + 1 != self.n_operands {
            return Err(Error::UnsupportedOperators(format!(
                "{} operators for {} operands",
                self.operators.len(),
                self.n_operands
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithmeticQuery {
    /// Position in the dataset; stable key for aggregation.
    pub id: usize,
    pub operands: Vec<u64>,
    pub operators: Vec<Operator>,
    pub prompt: String,
    pub gold_result: u64,
    #[serde(rename = "gold_token_id")]
    pub gold_token: TokenId,
}

impl ArithmeticQuery {
    /// Build a query, checking bounds and single-token renderings.
    pub fn new(
        id: usize,
        operands: Vec<u64>,
        operators: Vec<Operator>,
        bound: u64,
        tokenizer: &Tokenizer,
    ) -> Result<Self> {
        if operands.len() != operators.len() + 1 || !(2..=3).contains(&operands.len()) {
            return Err(Error::InvalidQuery(format!(
                "{} operands with {} operators",
                operands.len(),
                operators.len()
            )));
        }
        for &op in &operands {
            if op > bound || tokenizer.integer_token(op, true).is_none() {
                return Err(Error::InvalidQuery(format!(
                    "operand {op} is not a single token within [0, {bound}]"
                )));
            }
        }
        let result = evaluate(&operands, &operators);
        if result < 0 || result as u64 > bound {
            return Err(Error::InvalidQuery(format!(
                "result {result} outside [0, {bound}]"
            )));
        }
        let gold_result = result as u64;
        let gold_token = tokenizer.integer_token(gold_result, true).ok_or_else(|| {
            Error::InvalidQuery(format!("result {gold_result} is not a single token"))
        })?;
        Ok(Self {
            id,
            prompt: render_prompt(&operands, &operators),
            operands,
            operators,
            gold_result,
            gold_token,
        })
    }

    /// Operand/operator tuple identifying the query.
    pub fn key(&self) -> (Vec<u64>, Vec<Operator>) {
        (self.operands.clone(), self.operators.clone())
    }
}

/// Left-to-right evaluation.
pub fn evaluate(operands: &[u64], operators: &[Operator]) -> i64 {
    let mut acc = operands[0] as i64;
    for (op, &x) in operators.iter().zip(&operands[1..]) {
        acc = op.apply(acc, x as i64);
    }
    acc
}

/// `Please calculate a ∘ b [□ c] =` with single spaces and nothing after `=`.
pub fn render_prompt(operands: &[u64], operators: &[Operator]) -> String {
    let mut s = format!("Please calculate {}", operands[0]);
    for (op, x) in operators.iter().zip(&operands[1..]) {
        s.push_str(&format!(" {op} {x}"));
    }
    s.push_str(" =");
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub queries: Vec<ArithmeticQuery>,
}

/// Values usable as operands/results: in `[0, bound]` and single-token with a
/// leading space.
pub fn valid_values(tokenizer: &Tokenizer, bound: u64) -> Vec<u64> {
    (0..=bound)
        .filter(|&n| tokenizer.integer_token(n, true).is_some())
        .collect()
}

struct Space {
    values: Vec<u64>,
    /// membership for result values, indexed by value
    allowed: Vec<bool>,
    bound: u64,
}

impl Space {
    fn new(tokenizer: &Tokenizer, bound: u64) -> Self {
        let values = valid_values(tokenizer, bound);
        let mut allowed = vec![false; bound as usize + 1];
        for &v in &values {
            allowed[v as usize] = true;
        }
        Self {
            values,
            allowed,
            bound,
        }
    }

    fn result_ok(&self, r: i64) -> bool {
        r >= 0 && r as u64 <= self.bound && self.allowed[r as usize]
    }

    /// Number of valid tuples for `operators`.
    fn size(&self, operators: &[Operator]) -> u64 {
        match operators {
            [op] => self
                .values
                .iter()
                .map(|&a| {
                    self.values
                        .iter()
                        .filter(|&&b| self.result_ok(op.apply(a as i64, b as i64)))
                        .count() as u64
                })
                .sum(),
            [first, second] => {
                // completions[s] = #c such that s ∘ c is a valid result, for
                // every reachable partial result s.
                let b = self.bound as i64;
                let offset = b;
                let completions: Vec<u64> = (-b..=2 * b)
                    .map(|s| {
                        self.values
                            .iter()
                            .filter(|&&c| self.result_ok(second.apply(s, c as i64)))
                            .count() as u64
                    })
                    .collect();
                let mut total = 0;
                for &x in &self.values {
                    for &y in &self.values {
                        let s = first.apply(x as i64, y as i64);
                        total += completions[(s + offset) as usize];
                    }
                }
                total
            }
            _ => 0,
        }
    }

    fn enumerate(&self, operators: &[Operator]) -> Vec<Vec<u64>> {
        let mut out = Vec::new();
        match operators {
            [op] => {
                for &a in &self.values {
                    for &b in &self.values {
                        if self.result_ok(op.apply(a as i64, b as i64)) {
                            out.push(vec![a, b]);
                        }
                    }
                }
            }
            [first, second] => {
                for &a in &self.values {
                    for &b in &self.values {
                        let s = first.apply(a as i64, b as i64);
                        for &c in &self.values {
                            if self.result_ok(second.apply(s, c as i64)) {
                                out.push(vec![a, b, c]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        out
    }
}

/// Size of the valid tuple space for `spec` under `tokenizer`.
pub fn space_size(spec: &DatasetSpec, tokenizer: &Tokenizer) -> Result<u64> {
    spec.check()?;
    Ok(Space::new(tokenizer, spec.size_class.bound()).size(&spec.operators))
}

pub fn generate(spec: &DatasetSpec, tokenizer: &Tokenizer) -> Result<Dataset> {
    spec.check()?;
    let bound = spec.size_class.bound();
    let space = Space::new(tokenizer, bound);
    let available = space.size(&spec.operators);
    if spec.count as u64 > available {
        return Err(Error::InfeasibleCount {
            requested: spec.count,
            available: available as usize,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tuples: Vec<Vec<u64>> = if spec.n_operands == 2 || available <= ENUMERATION_LIMIT {
        let mut all = space.enumerate(&spec.operators);
        for i in 0..spec.count {
            let j = rng.gen_range(i..all.len());
            all.swap(i, j);
        }
        all.truncate(spec.count);
        all
    } else {
        let mut seen = HashSet::with_capacity(spec.count);
        let mut picked = Vec::with_capacity(spec.count);
        let n = space.values.len();
        while picked.len() < spec.count {
            let tuple: Vec<u64> = (0..spec.n_operands)
                .map(|_| space.values[rng.gen_range(0..n)])
                .collect();
            if space.result_ok(evaluate(&tuple, &spec.operators)) && seen.insert(tuple.clone()) {
                picked.push(tuple);
            }
        }
        picked
    };
    let queries = tuples
        .into_iter()
        .enumerate()
        .map(|(id, operands)| {
            ArithmeticQuery::new(id, operands, spec.operators.clone(), bound, tokenizer)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        queries,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    name: String,
    spec: DatasetSpec,
}

impl Dataset {
    pub fn name(&self) -> String {
        self.spec.name()
    }

    /// JSON-lines: one header line carrying the [`DatasetSpec`], then one query per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            format: DATASET_FORMAT.to_string(),
            name: self.name(),
            spec: self.spec.clone(),
        };
        let ctx = "dataset jsonl";
        let line = serde_json::to_string(&header).map_err(|e| Error::json(ctx, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(ctx, e))?;
        for q in &self.queries {
            let line = serde_json::to_string(q).map_err(|e| Error::json(ctx, e))?;
            writeln!(out, "{line}").map_err(|e| Error::io(ctx, e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let ctx = "dataset jsonl";
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidQuery("empty dataset file".into()))?
            .map_err(|e| Error::io(ctx, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::json(ctx, e))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::InvalidQuery(format!(
                "unknown dataset format {}",
                header.format
            )));
        }
        let mut queries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(ctx, e))?;
            if line.trim().is_empty() {
                continue;
            }
            queries.push(serde_json::from_str(&line).map_err(|e| Error::json(ctx, e))?);
        }
        Ok(Self {
            spec: header.spec,
            queries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

/// Anything that produces next-token logits for a prompt.
pub trait Predictor: Sync {
    fn vocab_size(&self) -> usize;
    fn next_token_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>>;
}

impl Predictor for Model {
    fn vocab_size(&self) -> usize {
        Model::vocab_size(self)
    }

    fn next_token_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let pos = tokens.len().checked_sub(1).ok_or(Error::EmptyInput)?;
        Ok(self.forward_with_taps(tokens, pos)?.final_logits)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of queries whose greedy next token is the gold token.
pub fn evaluate_accuracy<P: Predictor>(
    model: &P,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
) -> Result<f64> {
    if tokenizer.vocab_size() > model.vocab_size() {
        return Err(Error::VocabMismatch(format!(
            "tokenizer has {} tokens, model only {}",
            tokenizer.vocab_size(),
            model.vocab_size()
        )));
    }
    if dataset.queries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits = dataset
        .queries
        .par_iter()
        .map(|q| -> Result<bool> {
            let tokens = tokenizer.encode(&q.prompt)?;
            let logits = model.next_token_logits(&tokens)?;
            Ok(argmax(&logits) == q.gold_token as usize)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
