// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

pub mod datasets;
pub mod oracle;
pub mod synth;

use std::path::PathBuf;
use std::sync::OnceLock;

use arithlens::tokenizer::Tokenizer;

pub fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/gpt2")
}

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn gpt2_tokenizer() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        Tokenizer::from_files(&assets().join("vocab.json"), &assets().join("merges.txt")).unwrap()
    })
}
