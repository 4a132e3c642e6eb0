// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven pipeline: generate datasets, sweep the lens, aggregate
//! metrics, optionally run interventions, and emit a hashed bundle.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! datasets/<name>.jsonl            queries, spec in the header line
//! lens/<name>.jsonl                one LensRecord per query
//! interventions/<name>_<field>.jsonl  per-pair, per-layer deltas
//! numerical_mass.csv  topk_numerical_proportion.csv  absolute_error.csv
//! gold_rank.csv  gold_probability.csv  frequent_tokens.csv
//! interventions.csv                per-layer mean deltas (when planned)
//! summary.json                     scalar statistics
//! figures/*.svg                    optional
//! manifest.json                    sha256 of every file above
//! ```
//!
//! JSONL artifacts double as stage caches: a stage reuses an existing file
//! whose header matches the current config and regenerates it otherwise.
//! Nothing time-dependent is written, so identical configs give identical
//! bytes.

pub mod config;
pub mod svg;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, InterventionPlan, ModelPaths};

use crate::dataset::{generate, Dataset};
use crate::error::{Error, Result};
use crate::interventions::{
    derive_source, layer_means, sweep_layers, Field, InterventionOutcome, LayerEffect, Skip,
};
use crate::lens::{self, LensHeader, LensRecord, SweepOptions, LENS_FORMAT};
use crate::metrics::{self, FrequentTokenEntry, LayerSeries, PropagationStats, SufficiencyReport};
use crate::model::{load_model, Model, ModelConfig, SiteKind, TokenId};
use crate::tokenizer::Tokenizer;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SUMMARY_FORMAT: &str = "arithlens.summary.v1";
pub const CSV_SCHEMA: &str = "arithlens.csv.v1";
pub const INTERVENTION_FORMAT: &str = "arithlens.interventions.v1";
pub const MANIFEST_FORMAT: &str = "arithlens.manifest.v1";
/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "ARITHLENS_WORKERS";

/// What a CLI subcommand asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Datasets only.
    GenData,
    /// Datasets and lens records.
    Lens,
    /// Metric CSVs and summary from cached lens records.
    Metrics,
    /// Datasets and intervention sweeps.
    Intervene,
    /// Full bundle from cached artifacts, without loading the model.
    Report,
    /// Everything, computing whatever is missing.
    Run,
}

/// Process exit code for an error: 1 config, 2 model/tokenizer load,
/// 3 anything at run time.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Stage { stage, .. } if stage == "config" => 1,
        Error::Stage { stage, .. } if stage == "load" => 2,
        Error::Config(_) | Error::Json { .. } => 1,
        Error::MissingWeight(_)
        | Error::ShapeMismatch { .. }
        | Error::CorruptTensor(_)
        | Error::UnsupportedDtype { .. }
        | Error::Container(_) => 2,
        _ => 3,
    }
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage(stage, None),
    })
}

/// Rayon pool sized by `ARITHLENS_WORKERS` (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!("{WORKERS_ENV}={v} is not a positive integer"))
            })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub n_queries: usize,
    pub accuracy: f64,
    /// Pearson correlation of the post-ATT and post-MLP numerical-mass means.
    pub numerical_mass_correlation: Option<f64>,
    pub numerical_mass_post_att: Vec<Option<f64>>,
    pub numerical_mass_post_mlp: Vec<Option<f64>>,
    pub propagation: PropagationStats,
    pub frequent_tokens: Vec<FrequentTokenEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSummary {
    pub dataset: String,
    pub field: Field,
    pub n_pairs: usize,
    pub skipped: Vec<Skip>,
    pub means: Vec<LayerEffect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub model_id: String,
    pub config_hash: String,
    pub datasets: Vec<DatasetSummary>,
    /// Over all 3-operand datasets.
    pub sufficiency: Option<SufficiencyReport>,
    pub interventions: Vec<InterventionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub model_id: String,
    pub config_hash: String,
    pub schemas: BTreeMap<String, String>,
    /// sha256 of each dataset file, by dataset name.
    pub datasets: BTreeMap<String, String>,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub summary: Option<Summary>,
    pub manifest: Option<Manifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairInfo {
    id: usize,
    base: String,
    source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InterventionHeader {
    format: String,
    model: String,
    dataset: String,
    field: Field,
    seed: u64,
    max_pairs: Option<usize>,
    layers: [usize; 2],
    pairs: Vec<PairInfo>,
    skipped: Vec<Skip>,
}

/// Write through a temporary file so an interrupted run never leaves a
/// truncated artifact behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

struct Context {
    config: ExperimentConfig,
    config_hash: String,
    out: PathBuf,
    tokenizer: Tokenizer,
    model: Option<Model>,
    n_layers: usize,
    extra_targets: Vec<TokenId>,
}

impl Context {
    fn model(&mut self) -> Result<&Model> {
        if self.model.is_none() {
            let m = &self.config.model;
            let model = staged("load", load_model(&m.config, &m.weights))?;
            if self.tokenizer.vocab_size() > model.vocab_size() {
                return Err(Error::VocabMismatch(format!(
                    "tokenizer has {} tokens, model only {}",
                    self.tokenizer.vocab_size(),
                    model.vocab_size()
                ))
                .in_stage("load", None));
            }
            self.model = Some(model);
        }
        Ok(self.model.as_ref().expect("loaded above"))
    }

    fn dataset_path(&self, name: &str) -> PathBuf {
        self.out.join("datasets").join(format!("{name}.jsonl"))
    }

    fn lens_path(&self, name: &str) -> PathBuf {
        self.out.join("lens").join(format!("{name}.jsonl"))
    }

    fn intervention_path(&self, name: &str, field: Field) -> PathBuf {
        self.out
            .join("interventions")
            .join(format!("{name}_{}.jsonl", field.as_str()))
    }
}

/// Run the whole pipeline for a config whose paths are already resolved.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    run_command(config, Command::Run)
}

pub fn run_command(config: &ExperimentConfig, command: Command) -> Result<RunOutcome> {
    let mut ctx = staged("config", prepare(config))?;
    let datasets = staged("gen-data", stage_datasets(&ctx))?;
    let mut outcome = RunOutcome {
        output_dir: ctx.out.clone(),
        summary: None,
        manifest: None,
    };
    if command == Command::GenData {
        return Ok(outcome);
    }

    let compute = matches!(command, Command::Lens | Command::Run);
    if matches!(
        command,
        Command::Lens | Command::Metrics | Command::Report | Command::Run
    ) {
        let records = staged("lens", stage_lens(&mut ctx, &datasets, compute))?;
        if command == Command::Lens {
            return Ok(outcome);
        }
        let interventions = if ctx.config.interventions.is_some() {
            let compute = command == Command::Run;
            staged(
                "intervene",
                stage_interventions(&mut ctx, &datasets, compute, command == Command::Metrics),
            )?
        } else {
            Vec::new()
        };
        let summary = staged("metrics", stage_metrics(&ctx, &records, interventions))?;
        if matches!(command, Command::Report | Command::Run) {
            if ctx.config.svg {
                staged("report", stage_figures(&ctx, &records, &summary))?;
            }
            outcome.manifest = Some(staged("report", stage_manifest(&ctx, &datasets))?);
        }
        outcome.summary = Some(summary);
        return Ok(outcome);
    }

    // Intervene
    staged(
        "intervene",
        stage_interventions(&mut ctx, &datasets, true, false),
    )?;
    Ok(outcome)
}

fn prepare(config: &ExperimentConfig) -> Result<Context> {
    config.validate()?;
    config.check_files()?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let probe = out.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;

    let m = &config.model;
    let tokenizer = match (&m.tokenizer_json, &m.vocab, &m.merges) {
        (Some(path), _, _) => Tokenizer::from_tokenizer_json(path),
        (None, Some(v), Some(mg)) => Tokenizer::from_files(v, mg),
        _ => Err(Error::Config("no tokenizer source".into())),
    }
    .map_err(|e| e.in_stage("load", None))?;
    let model_config = ModelConfig::from_path(&m.config).map_err(|e| e.in_stage("load", None))?;
    let mut extra_targets = Vec::new();
    for t in &config.extra_targets {
        match tokenizer.encode(t)?.as_slice() {
            [id] => extra_targets.push(*id),
            ids => {
                return Err(Error::Config(format!(
                    "target {t:?} is {} tokens, expected 1",
                    ids.len()
                )))
            }
        }
    }
    Ok(Context {
        config_hash: config.hash()?,
        config: config.clone(),
        out,
        tokenizer,
        model: None,
        n_layers: model_config.n_layers,
        extra_targets,
    })
}

fn stage_datasets(ctx: &Context) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for spec in &ctx.config.datasets {
        let path = ctx.dataset_path(&spec.name());
        if path.exists() {
            if let Ok(cached) = Dataset::load(&path) {
                if &cached.spec == spec && cached.queries.len() == spec.count {
                    out.push(cached);
                    continue;
                }
            }
        }
        let ds = generate(spec, &ctx.tokenizer)?;
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf)?;
        write_atomic(&path, &buf)?;
        out.push(ds);
    }
    Ok(out)
}

fn lens_header(ctx: &Context, name: &str) -> LensHeader {
    LensHeader {
        format: LENS_FORMAT.to_string(),
        model: ctx.config.model.id.clone(),
        dataset: name.to_string(),
        k: ctx.config.k,
        n_layers: ctx.n_layers,
        extra_targets: ctx.extra_targets.clone(),
    }
}

fn cached_lens(path: &Path, header: &LensHeader, ds: &Dataset) -> Option<Vec<LensRecord>> {
    let (h, records) = lens::load_records(path).ok()?;
    let fits = &h == header
        && records.len() == ds.queries.len()
        && records
            .iter()
            .zip(&ds.queries)
            .all(|(r, q)| r.query_id == q.id && r.prompt == q.prompt);
    fits.then_some(records)
}

/// Lens records per dataset, in config order.
fn stage_lens(
    ctx: &mut Context,
    datasets: &[Dataset],
    compute: bool,
) -> Result<Vec<(String, Vec<LensRecord>)>> {
    let mut out = Vec::new();
    for ds in datasets {
        let name = ds.name();
        let path = ctx.lens_path(&name);
        let header = lens_header(ctx, &name);
        if let Some(records) = cached_lens(&path, &header, ds) {
            out.push((name, records));
            continue;
        }
        if !compute {
            return Err(Error::MissingArtifact {
                what: "lens records",
                path,
            });
        }
        let options = SweepOptions {
            k: ctx.config.k,
            extra_targets: ctx.extra_targets.clone(),
        };
        let records = {
            ctx.model()?;
            let model = ctx.model.as_ref().expect("loaded");
            lens::sweep_dataset(model, &ctx.tokenizer, ds, &options)?
        };
        let mut buf = Vec::new();
        lens::write_records(&mut buf, &header, &records)?;
        write_atomic(&path, &buf)?;
        out.push((name, records));
    }
    Ok(out)
}

fn read_interventions(path: &Path) -> Result<(InterventionHeader, Vec<InterventionOutcome>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let ctx = "interventions jsonl";
    let first = lines
        .next()
        .ok_or(Error::EmptyPairs)?
        .map_err(|e| Error::io(path, e))?;
    let header: InterventionHeader =
        serde_json::from_str(&first).map_err(|e| Error::json(ctx, e))?;
    let mut rows = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line).map_err(|e| Error::json(ctx, e))?);
        }
    }
    Ok((header, rows))
}

/// `skip_missing`: return only what is cached instead of failing.
fn stage_interventions(
    ctx: &mut Context,
    datasets: &[Dataset],
    compute: bool,
    skip_missing: bool,
) -> Result<Vec<InterventionSummary>> {
    let plan = ctx.config.interventions.clone().expect("caller checks");
    let [first, last] = plan.layers.unwrap_or([1, ctx.n_layers]);
    if last > ctx.n_layers {
        return Err(Error::LayerOutOfRange {
            layer: last,
            n_layers: ctx.n_layers,
        });
    }
    let mut summaries = Vec::new();
    for name in &plan.datasets {
        let ds = datasets
            .iter()
            .find(|d| &d.name() == name)
            .expect("validated");
        let bound = ds.spec.size_class.bound();
        let bases = &ds.queries[..plan.max_pairs.unwrap_or(usize::MAX).min(ds.queries.len())];
        for &field in &plan.fields {
            let mut pairs = Vec::new();
            let mut skipped = Vec::new();
            for q in bases {
                match derive_source(q, field, plan.seed, bound, &ctx.tokenizer) {
                    Ok(p) => pairs.push(p),
                    Err(s) => skipped.push(s),
                }
            }
            let header = InterventionHeader {
                format: INTERVENTION_FORMAT.to_string(),
                model: ctx.config.model.id.clone(),
                dataset: name.clone(),
                field,
                seed: plan.seed,
                max_pairs: plan.max_pairs,
                layers: [first, last],
                pairs: pairs
                    .iter()
                    .map(|p| PairInfo {
                        id: p.id,
                        base: p.base.prompt.clone(),
                        source: p.source.prompt.clone(),
                    })
                    .collect(),
                skipped: skipped.clone(),
            };
            let path = ctx.intervention_path(name, field);
            let cached = read_interventions(&path).ok().and_then(|(h, rows)| {
                (h.model == header.model
                    && h.dataset == header.dataset
                    && h.field == header.field
                    && h.seed == header.seed
                    && h.max_pairs == header.max_pairs
                    && h.layers == header.layers
                    && h.pairs == header.pairs)
                    .then_some((h, rows))
            });
            let (header, rows) = match cached {
                Some(c) => c,
                None if compute => {
                    let result = if pairs.is_empty() {
                        Err(Error::EmptyPairs)
                    } else {
                        ctx.model()?;
                        let model = ctx.model.as_ref().expect("loaded");
                        sweep_layers(model, &ctx.tokenizer, &pairs, first..=last)
                    }
                    .map_err(|e| {
                        e.in_stage("intervene", Some(format!("{name} {}", field.as_str())))
                    })?;
                    let mut header = header;
                    header.skipped.extend(result.skipped);
                    let mut buf = Vec::new();
                    let ctx_name = "interventions jsonl";
                    let line =
                        serde_json::to_string(&header).map_err(|e| Error::json(ctx_name, e))?;
                    writeln!(buf, "{line}").map_err(|e| Error::io(&path, e))?;
                    for row in &result.per_pair {
                        let line =
                            serde_json::to_string(row).map_err(|e| Error::json(ctx_name, e))?;
                        writeln!(buf, "{line}").map_err(|e| Error::io(&path, e))?;
                    }
                    write_atomic(&path, &buf)?;
                    (header, result.per_pair)
                }
                None if skip_missing => continue,
                None => {
                    return Err(Error::MissingArtifact {
                        what: "intervention results",
                        path,
                    })
                }
            };
            let layers: Vec<usize> = (first..=last).collect();
            let n_pairs = header.pairs.len() - (header.skipped.len() - skipped.len());
            summaries.push(InterventionSummary {
                dataset: name.clone(),
                field,
                n_pairs,
                skipped: header.skipped,
                means: layer_means(&rows, &layers),
            });
        }
    }
    Ok(summaries)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))
}

fn series_rows(dataset: &str, k: Option<usize>, s: &LayerSeries) -> Vec<Vec<String>> {
    s.layers
        .iter()
        .map(|l| {
            let mut row = vec![dataset.to_string()];
            if let Some(k) = k {
                row.push(k.to_string());
            }
            row.extend([
                s.kind.as_str().to_string(),
                l.layer.to_string(),
                l.count.to_string(),
                opt(l.mean),
                opt(l.q1),
                opt(l.median),
                opt(l.q3),
            ]);
            row
        })
        .collect()
}

const STAT_COLUMNS: [&str; 7] = ["site", "layer", "count", "mean", "q1", "median", "q3"];

/// File name, header, rows.
type CsvFile<'a> = (&'a str, Vec<&'a str>, Vec<Vec<String>>);

fn stage_metrics(
    ctx: &Context,
    records: &[(String, Vec<LensRecord>)],
    interventions: Vec<InterventionSummary>,
) -> Result<Summary> {
    let ks: Vec<usize> = [1, 10].into_iter().filter(|&k| k <= ctx.config.k).collect();
    let mut mass = Vec::new();
    let mut proportion = Vec::new();
    let mut abs_error = Vec::new();
    let mut rank = Vec::new();
    let mut prob = Vec::new();
    let mut frequent_rows = Vec::new();
    let mut datasets = Vec::new();
    let mut three_operand: Vec<LensRecord> = Vec::new();

    for (name, recs) in records {
        let mut frequent = Vec::new();
        let mut mass_means = BTreeMap::new();
        for kind in SiteKind::ALL {
            let m = metrics::numerical_mass_series(recs, kind)
                .map_err(|e| e.in_stage("metrics", Some(name.clone())))?;
            mass.extend(series_rows(name, None, &m));
            mass_means.insert(kind, m.means());
            for &k in &ks {
                proportion.extend(series_rows(
                    name,
                    Some(k),
                    &metrics::topk_numerical_proportion(recs, kind, k)?,
                ));
                abs_error.extend(series_rows(
                    name,
                    Some(k),
                    &metrics::absolute_error_series(recs, kind, k)?,
                ));
            }
            let (r, p) = metrics::target_trajectory(recs, kind)?;
            rank.extend(series_rows(name, None, &r));
            prob.extend(series_rows(name, None, &p));
            frequent.extend(metrics::frequent_token_table(recs, kind)?);
        }
        for f in &frequent {
            frequent_rows.push(vec![
                name.clone(),
                f.site.as_str().to_string(),
                f.layer.to_string(),
                f.token_id.to_string(),
                f.token.clone(),
                f.mean_probability.to_string(),
                f.frequency_share.to_string(),
            ]);
        }
        if recs.iter().all(|r| r.operands.len() == 3) {
            three_operand.extend(recs.iter().cloned());
        }
        let post_att = mass_means
            .remove(&SiteKind::PostAttention)
            .unwrap_or_default();
        let post_mlp = mass_means.remove(&SiteKind::PostMlp).unwrap_or_default();
        datasets.push(DatasetSummary {
            name: name.clone(),
            n_queries: recs.len(),
            accuracy: metrics::accuracy(recs)?,
            numerical_mass_correlation: metrics::pearson(&post_att, &post_mlp),
            numerical_mass_post_att: post_att,
            numerical_mass_post_mlp: post_mlp,
            propagation: metrics::operand_propagation_stats(recs)?,
            frequent_tokens: frequent,
        });
    }

    let stat_header = |prefix: &[&'static str]| -> Vec<&'static str> {
        prefix.iter().copied().chain(STAT_COLUMNS).collect()
    };
    let files: [CsvFile; 6] = [
        ("numerical_mass.csv", stat_header(&["dataset"]), mass),
        (
            "topk_numerical_proportion.csv",
            stat_header(&["dataset", "k"]),
            proportion,
        ),
        (
            "absolute_error.csv",
            stat_header(&["dataset", "k"]),
            abs_error,
        ),
        ("gold_rank.csv", stat_header(&["dataset"]), rank),
        ("gold_probability.csv", stat_header(&["dataset"]), prob),
        (
            "frequent_tokens.csv",
            vec![
                "dataset",
                "site",
                "layer",
                "token_id",
                "token",
                "mean_probability",
                "frequency_share",
            ],
            frequent_rows,
        ),
    ];
    for (file, header, rows) in files {
        write_atomic(&ctx.out.join(file), &csv_bytes(&header, rows)?)?;
    }

    if !interventions.is_empty() {
        let mut rows = Vec::new();
        for s in &interventions {
            for m in &s.means {
                rows.push(vec![
                    s.dataset.clone(),
                    s.field.as_str().to_string(),
                    m.layer.to_string(),
                    m.n_pairs.to_string(),
                    m.delta_base_prob.to_string(),
                    m.delta_source_prob.to_string(),
                ]);
            }
        }
        let header = [
            "dataset",
            "field",
            "layer",
            "n_pairs",
            "delta_base_prob",
            "delta_source_prob",
        ];
        write_atomic(
            &ctx.out.join("interventions.csv"),
            &csv_bytes(&header, rows)?,
        )?;
    }

    let summary = Summary {
        format: SUMMARY_FORMAT.to_string(),
        model_id: ctx.config.model.id.clone(),
        config_hash: ctx.config_hash.clone(),
        datasets,
        sufficiency: if three_operand.is_empty() {
            None
        } else {
            Some(metrics::operand_sufficiency(&three_operand)?)
        },
        interventions,
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json("summary", e))?;
    text.push('\n');
    write_atomic(&ctx.out.join("summary.json"), text.as_bytes())?;
    Ok(summary)
}

/// Legend label and per-layer values.
type PlotSeries = (String, Vec<Option<f64>>);

fn stage_figures(
    ctx: &Context,
    records: &[(String, Vec<LensRecord>)],
    summary: &Summary,
) -> Result<()> {
    let dir = ctx.out.join("figures");
    for (name, recs) in records {
        let pair = |f: &dyn Fn(SiteKind) -> Result<LayerSeries>| -> Result<Vec<PlotSeries>> {
            SiteKind::ALL
                .iter()
                .map(|&k| Ok((k.as_str().to_string(), f(k)?.means())))
                .collect()
        };
        let mut plots: Vec<(String, &str, Vec<PlotSeries>)> = vec![
            (
                "numerical_mass".into(),
                "probability mass",
                pair(&|k| metrics::numerical_mass_series(recs, k))?,
            ),
            (
                "gold_rank".into(),
                "rank of correct result",
                pair(&|k| metrics::target_trajectory(recs, k).map(|t| t.0))?,
            ),
        ];
        for k in [1, 10].into_iter().filter(|&k| k <= ctx.config.k) {
            plots.push((
                format!("top{k}_numerical_proportion"),
                "numerical share",
                pair(&|kind| metrics::topk_numerical_proportion(recs, kind, k))?,
            ));
            plots.push((
                format!("top{k}_absolute_error"),
                "absolute error",
                pair(&|kind| metrics::absolute_error_series(recs, kind, k))?,
            ));
        }
        for (stem, y, series) in plots {
            let svg = svg::line_plot(&format!("{name}: {stem}"), y, &series);
            write_atomic(&dir.join(format!("{name}_{stem}.svg")), svg.as_bytes())?;
        }
    }
    for s in &summary.interventions {
        let series = vec![
            (
                "delta base prob".to_string(),
                s.means.iter().map(|m| Some(m.delta_base_prob)).collect(),
            ),
            (
                "delta source prob".to_string(),
                s.means.iter().map(|m| Some(m.delta_source_prob)).collect(),
            ),
        ];
        let stem = format!("{}_{}_interventions", s.dataset, s.field.as_str());
        let svg = svg::line_plot(&stem, "probability change", &series);
        write_atomic(&dir.join(format!("{stem}.svg")), svg.as_bytes())?;
    }
    Ok(())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.extension().is_some_and(|e| e != "partial")
            && path != root.join("manifest.json")
        {
            out.push(path);
        }
    }
    Ok(())
}

fn stage_manifest(ctx: &Context, datasets: &[Dataset]) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(&ctx.out, &ctx.out, &mut paths)?;
    let mut files = Vec::new();
    for p in paths {
        let (bytes, sha256) = sha256_file(&p)?;
        let rel = p
            .strip_prefix(&ctx.out)
            .expect("walked from root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        files.push(ManifestEntry {
            path: rel,
            bytes,
            sha256,
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let mut dataset_hashes = BTreeMap::new();
    for ds in datasets {
        let (_, h) = sha256_file(&ctx.dataset_path(&ds.name()))?;
        dataset_hashes.insert(ds.name(), h);
    }
    let schemas = [
        ("dataset", crate::dataset::DATASET_FORMAT),
        ("lens", LENS_FORMAT),
        ("interventions", INTERVENTION_FORMAT),
        ("summary", SUMMARY_FORMAT),
        ("csv", CSV_SCHEMA),
        ("manifest", MANIFEST_FORMAT),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        model_id: ctx.config.model.id.clone(),
        config_hash: ctx.config_hash.clone(),
        schemas,
        datasets: dataset_hashes,
        files,
    };
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    text.push('\n');
    write_atomic(&ctx.out.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}
