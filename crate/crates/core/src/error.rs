// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing weight {0}")]
    MissingWeight(String),

    #[error("shape mismatch {name} expected {expected:?} got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("corrupt tensor {0}")]
    CorruptTensor(String),

    #[error("unsupported dtype {dtype} for tensor {name}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("no usable {what} at {path}; run an earlier stage first")]
    MissingArtifact { what: &'static str, path: PathBuf },

    #[error("weights container: {0}")]
    Container(String),

    #[error("empty token sequence")]
    EmptyInput,

    #[error("position {position} out of range for {len} tokens")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("context overflow: {len} tokens exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error(
        "infeasible dataset: requested {requested} queries but only {available} valid ones exist"
    )]
    InfeasibleCount { requested: usize, available: usize },

    #[error("unsupported operator tuple {0}")]
    UnsupportedOperators(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("k={k} exceeds stored top-k length {stored}")]
    TopkTooShort { k: usize, stored: usize },

    #[error("target {0} missing from record")]
    MissingTarget(String),

    #[error("wrong operand arity: expected {expected}, got {got}")]
    WrongArity { expected: usize, got: usize },

    #[error("prompt token lengths differ: base {base}, source {source_len}")]
    TokenLengthMismatch { base: usize, source_len: usize },

    #[error("empty intervention pair set")]
    EmptyPairs,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },

    #[error("stage {stage} failed{}: {source}", query.as_ref().map(|q| format!(" at query {q}")).unwrap_or_default())]
    Stage {
        stage: String,
        query: Option<String>,
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Attach the pipeline stage (and query, if any) the error came from.
    pub fn in_stage(self, stage: &str, query: Option<String>) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            query,
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
