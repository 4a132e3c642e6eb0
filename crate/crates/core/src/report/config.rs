// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::interventions::Field;
use crate::lens::DEFAULT_K;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    /// Free-form name recorded in outputs.
    pub id: String,
    /// Hugging Face style `config.json`.
    pub config: PathBuf,
    /// safetensors file, shard directory, or shard index json.
    pub weights: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merges: Option<PathBuf>,
    /// Alternative to `vocab` + `merges`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer_json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    /// Dataset names (as in output file names) to draw base queries from.
    pub datasets: Vec<String>,
    pub fields: Vec<Field>,
    #[serde(default)]
    pub seed: u64,
    /// Use at most this many base queries per dataset, in dataset order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pairs: Option<usize>,
    /// Inclusive `[first, last]`; all layers when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<[usize; 2]>,
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelPaths,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Token strings tracked at every site besides gold, operands and
    /// operators; each must be a single token.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interventions: Option<InterventionPlan>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub svg: bool,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("experiment config", e))
    }

    /// Parse a config file. Relative paths are kept as written; see
    /// [`ExperimentConfig::resolved`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("experiment config", e))
    }

    /// SHA-256 of the canonical JSON form with file locations blanked, so
    /// the same experiment hashes alike wherever its inputs and outputs live.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        let m = &mut canonical.model;
        m.config = PathBuf::new();
        m.weights = PathBuf::new();
        m.vocab = m.vocab.as_ref().map(|_| PathBuf::new());
        m.merges = m.merges.as_ref().map(|_| PathBuf::new());
        m.tokenizer_json = m.tokenizer_json.as_ref().map(|_| PathBuf::new());
        canonical.output_dir = PathBuf::new();
        let bytes =
            serde_json::to_vec(&canonical).map_err(|e| Error::json("experiment config", e))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    /// Copy with relative paths anchored at `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut out = self.clone();
        out.model.config = fix(&self.model.config);
        out.model.weights = fix(&self.model.weights);
        out.model.vocab = self.model.vocab.as_deref().map(fix);
        out.model.merges = self.model.merges.as_deref().map(fix);
        out.model.tokenizer_json = self.model.tokenizer_json.as_deref().map(fix);
        out.output_dir = fix(&self.output_dir);
        out
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        let mut names: Vec<String> = self.datasets.iter().map(|d| d.name()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("two datasets share a name".into());
        }
        let tokenizer_sources = (self.model.vocab.is_some() && self.model.merges.is_some()) as u8
            + self.model.tokenizer_json.is_some() as u8;
        if tokenizer_sources != 1 {
            return bad("give either vocab + merges or tokenizer_json".into());
        }
        if let Some(plan) = &self.interventions {
            for name in &plan.datasets {
                let Some(spec) = self.datasets.iter().find(|d| &d.name() == name) else {
                    return bad(format!("intervention dataset {name} is not configured"));
                };
                if spec.n_operands != 2 {
                    return bad(format!("intervention dataset {name} must have 2 operands"));
                }
            }
            if plan.fields.is_empty() {
                return bad("intervention plan has no fields".into());
            }
            if let Some([a, b]) = plan.layers {
                if a == 0 || a > b {
                    return bad(format!("bad intervention layer range [{a}, {b}]"));
                }
            }
        }
        Ok(())
    }

    /// Every referenced input file exists.
    pub fn check_files(&self) -> Result<()> {
        let m = &self.model;
        let files = [
            Some(&m.config),
            Some(&m.weights),
            m.vocab.as_ref(),
            m.merges.as_ref(),
        ]
        .into_iter()
        .chain([m.tokenizer_json.as_ref()])
        .flatten();
        for f in files {
            if !f.exists() {
                return Err(Error::Config(format!("{} does not exist", f.display())));
            }
        }
        Ok(())
    }
}
