// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE compatible with the GPT-2 and GPT-NeoX vocabularies.
//!
//! Loads the published `vocab.json` + `merges.txt` pair (or a Hugging Face
//! `tokenizer.json`). Also classifies every token as numerical or not: a token
//! is numerical iff, after stripping at most one leading space, its bytes are
//! a non-empty run of ASCII digits.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::TokenId;

const PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

pub struct Tokenizer {
    /// id -> raw bytes
    tokens: Vec<Vec<u8>>,
    /// byte-level unicode string -> id
    lookup: HashMap<String, TokenId>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    pattern: Regex,
    numerical: Vec<bool>,
    /// Integer value of numerical tokens (None for others or overflow).
    values: Vec<Option<u64>>,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("vocab_size", &self.tokens.len())
            .field("merges", &self.merge_ranks.len())
            .finish()
    }
}

/// GPT-2's reversible byte -> printable unicode map.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (b'!' as u32..=b'~' as u32).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0u32..256 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

impl Tokenizer {
    /// Load `vocab.json` (token -> id) and `merges.txt` (one pair per line).
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text =
            std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocab: HashMap<String, TokenId> = serde_json::from_str(&vocab_text)
            .map_err(|e| Error::json(vocab_path.display().to_string(), e))?;
        let merges_text =
            std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let merges = merges_text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::Tokenizer(format!("malformed merge line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vocab, merges)
    }

    /// Load a Hugging Face `tokenizer.json` with a BPE model.
    pub fn from_tokenizer_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let model = value
            .get("model")
            .ok_or_else(|| Error::Tokenizer("tokenizer.json lacks model".into()))?;
        let mut vocab: HashMap<String, TokenId> =
            serde_json::from_value(model.get("vocab").cloned().unwrap_or(Value::Null))
                .map_err(|e| Error::json("tokenizer.json model.vocab", e))?;
        if let Some(added) = value.get("added_tokens").and_then(Value::as_array) {
            for tok in added {
                if let (Some(id), Some(content)) = (
                    tok.get("id").and_then(Value::as_u64),
                    tok.get("content").and_then(Value::as_str),
                ) {
                    vocab.entry(content.to_string()).or_insert(id as TokenId);
                }
            }
        }
        let merges = model
            .get("merges")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Tokenizer("tokenizer.json lacks model.merges".into()))?
            .iter()
            .map(|m| match m {
                Value::String(s) => s
                    .split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::Tokenizer(format!("malformed merge {s:?}"))),
                Value::Array(pair) if pair.len() == 2 => Ok((
                    pair[0].as_str().unwrap_or_default().to_string(),
                    pair[1].as_str().unwrap_or_default().to_string(),
                )),
                other => Err(Error::Tokenizer(format!("malformed merge {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vocab, merges)
    }

    pub fn new(vocab: HashMap<String, TokenId>, merges: Vec<(String, String)>) -> Result<Self> {
        let byte_to_char = bytes_to_unicode();
        let mut char_to_byte = HashMap::with_capacity(256);
        for (b, &c) in byte_to_char.iter().enumerate() {
            char_to_byte.insert(c, b as u8);
        }
        let n = vocab.len();
        let mut tokens: Vec<Option<Vec<u8>>> = vec![None; n];
        for (s, &id) in &vocab {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Tokenizer(format!("token id {id} not dense in [0, {n})")))?;
            if slot.is_some() {
                return Err(Error::Tokenizer(format!("duplicate token id {id}")));
            }
            // Added/special tokens may contain characters outside the byte
            // alphabet; they decode as their UTF-8 text.
            let bytes = s
                .chars()
                .map(|c| char_to_byte.get(&c).copied())
                .collect::<Option<Vec<u8>>>()
                .unwrap_or_else(|| s.as_bytes().to_vec());
            *slot = Some(bytes);
        }
        let tokens: Vec<Vec<u8>> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::Tokenizer(format!("token id {i} missing"))))
            .collect::<Result<_>>()?;
        let merge_ranks = merges
            .into_iter()
            .enumerate()
            .map(|(rank, pair)| (pair, rank))
            .collect();
        let (numerical, values) = tokens.iter().map(|t| classify(t)).unzip();
        Ok(Self {
            tokens,
            lookup: vocab,
            merge_ranks,
            byte_to_char,
            pattern: Regex::new(PRETOKENIZE).map_err(|e| Error::Tokenizer(e.to_string()))?,
            numerical,
            values,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(text) {
            let piece = m.map_err(|e| Error::Tokenizer(e.to_string()))?.as_str();
            let mapped: String = piece
                .bytes()
                .map(|b| self.byte_to_char[b as usize])
                .collect();
            for symbol in self.bpe(&mapped) {
                let id = self.lookup.get(&symbol).ok_or_else(|| {
                    Error::Tokenizer(format!("symbol {symbol:?} not in vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self
                        .merge_ranks
                        .get(&(symbols[i].clone(), symbols[i + 1].clone()))
                        == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Decode to text; byte sequences that are not valid UTF-8 on their own
    /// (partial multi-byte tokens) are replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8]> {
        self.tokens
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    /// The id of `n` rendered (optionally with a leading space) iff that
    /// rendering encodes to exactly one token.
    pub fn integer_token(&self, n: u64, space_prefixed: bool) -> Option<TokenId> {
        let text = if space_prefixed {
            format!(" {n}")
        } else {
            n.to_string()
        };
        match self.encode(&text).ok()?.as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }

    pub fn is_numerical(&self, id: TokenId) -> Result<bool> {
        self.numerical
            .get(id as usize)
            .copied()
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    /// Integer value of a numerical token.
    pub fn numeric_value(&self, id: TokenId) -> Option<u64> {
        self.values.get(id as usize).copied().flatten()
    }

    /// Precomputed classification for every id.
    pub fn numerical_mask(&self) -> &[bool] {
        &self.numerical
    }

    pub fn numerical_count(&self) -> usize {
        self.numerical.iter().filter(|&&b| b).count()
    }
}

/// Numerical-token rule on raw token bytes: after stripping at most one
/// leading space, a non-empty run of ASCII digits. Returns the flag and the
/// integer value when it fits in a `u64`.
pub fn classify(bytes: &[u8]) -> (bool, Option<u64>) {
    let digits = bytes.strip_prefix(b" ").unwrap_or(bytes);
    if digits.is_empty() || !digits.iter().all(u8::is_ascii_digit) {
        return (false, None);
    }
    let value = std::str::from_utf8(digits)
        .ok()
        .and_then(|s| s.parse().ok());
    (true, value)
}
