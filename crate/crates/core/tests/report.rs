// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use arithlens::dataset::{DatasetSpec, Operator, SizeClass};
use arithlens::fixture::FixtureSpec;
use arithlens::interventions::Field;
use arithlens::lens::load_records;
use arithlens::model::{Family, SiteKind};
use arithlens::report::{
    exit_code, run_command, run_experiment, Command, ExperimentConfig, InterventionPlan, Manifest,
    ModelPaths, Summary,
};
use arithlens::Error;
use common::{assets, oracle};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn toy_model(dir: &Path, family: Family) -> ModelPaths {
    FixtureSpec::toy(family, 50257).write(dir).unwrap();
    ModelPaths {
        id: "toy".into(),
        config: dir.join("config.json"),
        weights: dir.join("model.safetensors"),
        vocab: Some(assets().join("vocab.json")),
        merges: Some(assets().join("merges.txt")),
        tokenizer_json: None,
    }
}

fn config(model: ModelPaths, out: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        model,
        datasets: vec![
            DatasetSpec::new(vec![Operator::Add], SizeClass::Small, 10, 0),
            DatasetSpec::new(vec![Operator::Add, Operator::Sub], SizeClass::Small, 6, 3),
        ],
        k: 10,
        extra_targets: vec!["\n".into()],
        interventions: Some(InterventionPlan {
            datasets: vec!["add_small".into()],
            fields: vec![Field::Operand2, Field::Operator],
            seed: 5,
            max_pairs: Some(4),
            layers: None,
        }),
        output_dir: out,
        svg: true,
    }
}

/// Relative path to contents, for every file under `root`.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

struct Bundle {
    _tmp: TempDir,
    cfg: ExperimentConfig,
    files: BTreeMap<String, Vec<u8>>,
}

fn bundle() -> Bundle {
    let tmp = TempDir::new().unwrap();
    let model = toy_model(&tmp.path().join("model"), Family::SequentialPreNorm);
    let cfg = config(model, tmp.path().join("out"));
    run_experiment(&cfg).unwrap();
    let files = tree(&cfg.output_dir);
    Bundle {
        _tmp: tmp,
        cfg,
        files,
    }
}

fn csv_rows(bytes: &[u8]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn parse_opt(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| s.parse().unwrap())
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
        (None, None) => true,
        _ => false,
    }
}

/// Compare CSV rows for one dataset/site against an oracle series; `offset`
/// is the index of the site column.
fn check_series(rows: &[Vec<String>], offset: usize, want: &oracle::Series, what: &str) {
    assert_eq!(rows.len(), want.len(), "{what}: row count");
    for (layer, (row, w)) in rows.iter().zip(want).enumerate() {
        assert_eq!(
            row[offset + 1],
            (layer + 1).to_string(),
            "{what}: layer column"
        );
        let got = [3, 4, 5, 6].map(|c| parse_opt(&row[offset + c]));
        let exp = match w {
            Some((m, q1, med, q3)) => [Some(*m), Some(*q1), Some(*med), Some(*q3)],
            None => [None; 4],
        };
        for (g, e) in got.iter().zip(exp) {
            assert!(close(*g, e), "{what} layer {}: {g:?} vs {e:?}", layer + 1);
        }
    }
}

#[test]
fn bundle_layout_and_csvs_match_recomputation() {
    let b = bundle();
    for f in [
        "numerical_mass.csv",
        "topk_numerical_proportion.csv",
        "absolute_error.csv",
        "gold_rank.csv",
        "gold_probability.csv",
        "frequent_tokens.csv",
        "interventions.csv",
        "summary.json",
        "manifest.json",
        "datasets/add_small.jsonl",
        "datasets/add_sub_small.jsonl",
        "lens/add_small.jsonl",
        "lens/add_sub_small.jsonl",
        "interventions/add_small_operand2.jsonl",
        "interventions/add_small_operator.jsonl",
        "figures/add_small_numerical_mass.svg",
    ] {
        assert!(b.files.contains_key(f), "missing {f}");
    }
    assert!(!b.files.keys().any(|k| k.ends_with(".partial")));

    let out = &b.cfg.output_dir;
    for name in ["add_small", "add_sub_small"] {
        let (header, records) =
            load_records(&out.join("lens").join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(header.n_layers, 3);
        assert_eq!(header.extra_targets, vec![198]);
        let pick = |file: &str, k: Option<usize>, kind: SiteKind| -> Vec<Vec<String>> {
            let (_, rows) = csv_rows(&b.files[file]);
            rows.into_iter()
                .filter(|r| r[0] == name)
                .filter(|r| k.map_or(true, |k| r[1] == k.to_string()))
                .filter(|r| r[if k.is_some() { 2 } else { 1 }] == kind.as_str())
                .collect()
        };
        for kind in SiteKind::ALL {
            let tag = format!("{name} {}", kind.as_str());
            check_series(
                &pick("numerical_mass.csv", None, kind),
                1,
                &oracle::mass(&records, kind),
                &tag,
            );
            check_series(
                &pick("gold_rank.csv", None, kind),
                1,
                &oracle::gold_rank(&records, kind),
                &tag,
            );
            check_series(
                &pick("gold_probability.csv", None, kind),
                1,
                &oracle::gold_prob(&records, kind),
                &tag,
            );
            for k in [1, 10] {
                check_series(
                    &pick("topk_numerical_proportion.csv", Some(k), kind),
                    2,
                    &oracle::proportion(&records, kind, k),
                    &tag,
                );
                check_series(
                    &pick("absolute_error.csv", Some(k), kind),
                    2,
                    &oracle::abs_error(&records, kind, k),
                    &tag,
                );
            }
        }
    }

    let summary: Summary = serde_json::from_slice(&b.files["summary.json"]).unwrap();
    assert_eq!(summary.model_id, "toy");
    assert_eq!(summary.config_hash, b.cfg.hash().unwrap());
    assert_eq!(summary.datasets.len(), 2);
    assert_eq!(summary.datasets[0].n_queries, 10);
    let sufficiency = summary.sufficiency.as_ref().unwrap();
    assert_eq!(sufficiency.n_queries, 6);
    assert_eq!(summary.interventions.len(), 2);
    for s in &summary.interventions {
        assert_eq!(s.means.len(), 3);
        assert_eq!(s.n_pairs + s.skipped.len(), 4);
        assert!(s.means.iter().all(|m| m.n_pairs == s.n_pairs));
    }
    let (header, rows) = csv_rows(&b.files["interventions.csv"]);
    assert_eq!(header[..3], ["dataset", "field", "layer"]);
    assert_eq!(rows.len(), 6);
}

#[test]
fn rerun_is_byte_identical_in_another_directory() {
    let b = bundle();
    let mut cfg = b.cfg.clone();
    cfg.output_dir = b.cfg.output_dir.with_file_name("second");
    run_experiment(&cfg).unwrap();
    let again = tree(&cfg.output_dir);
    assert_eq!(
        b.files.keys().collect::<Vec<_>>(),
        again.keys().collect::<Vec<_>>()
    );
    for (k, v) in &b.files {
        assert!(v == &again[k], "{k} differs");
    }
}

#[test]
fn manifest_hashes_every_other_file() {
    let b = bundle();
    let m: Manifest = serde_json::from_slice(&b.files["manifest.json"]).unwrap();
    let listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    let on_disk: Vec<&str> = b
        .files
        .keys()
        .map(String::as_str)
        .filter(|k| *k != "manifest.json")
        .collect();
    assert_eq!(listed, on_disk);
    for f in &m.files {
        let bytes = &b.files[&f.path];
        assert_eq!(f.bytes, bytes.len() as u64, "{}", f.path);
        assert_eq!(f.sha256, hex_digest(bytes), "{}", f.path);
    }
    assert_eq!(
        m.datasets["add_small"],
        hex_digest(&b.files["datasets/add_small.jsonl"])
    );
    assert_eq!(m.config_hash, b.cfg.hash().unwrap());
    for schema in ["dataset", "lens", "interventions", "summary", "csv"] {
        assert!(m.schemas.contains_key(schema), "{schema}");
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn deleted_artifacts_regenerate_identically() {
    let b = bundle();
    let out = &b.cfg.output_dir;
    for f in [
        "lens/add_sub_small.jsonl",
        "interventions/add_small_operator.jsonl",
        "summary.json",
        "gold_rank.csv",
        "manifest.json",
    ] {
        std::fs::remove_file(out.join(f)).unwrap();
    }
    std::fs::remove_dir_all(out.join("figures")).unwrap();
    run_experiment(&b.cfg).unwrap();
    assert_eq!(tree(out), b.files);
}

#[test]
fn cached_stages_do_not_touch_the_model() {
    let b = bundle();
    // Once every artifact is cached, a broken checkpoint goes unnoticed.
    std::fs::write(&b.cfg.model.weights, b"garbage").unwrap();
    run_experiment(&b.cfg).unwrap();
    assert_eq!(tree(&b.cfg.output_dir), b.files);

    // A stale cache (different k) must be recomputed and so hits the bad file.
    let mut cfg = b.cfg.clone();
    cfg.k = 5;
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(exit_code(&err), 2, "{err}");
}

#[test]
fn stale_dataset_file_is_regenerated() {
    let b = bundle();
    let path = b.cfg.output_dir.join("datasets/add_small.jsonl");
    let text = String::from_utf8(b.files["datasets/add_small.jsonl"].clone()).unwrap();
    let truncated: Vec<&str> = text.lines().take(4).collect();
    std::fs::write(&path, truncated.join("\n") + "\n").unwrap();
    run_command(&b.cfg, Command::GenData).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        b.files["datasets/add_small.jsonl"]
    );
}

#[test]
fn subcommands_stop_at_their_stage() {
    let tmp = TempDir::new().unwrap();
    let model = toy_model(&tmp.path().join("model"), Family::ParallelRotary);
    let cfg = config(model, tmp.path().join("out"));
    let out = &cfg.output_dir;

    run_command(&cfg, Command::GenData).unwrap();
    assert!(out.join("datasets/add_small.jsonl").exists());
    assert!(!out.join("lens").exists());

    let err = run_command(&cfg, Command::Report).unwrap_err();
    assert!(matches!(err.root(), Error::MissingArtifact { .. }), "{err}");
    assert_eq!(exit_code(&err), 3);

    run_command(&cfg, Command::Lens).unwrap();
    assert!(out.join("lens/add_sub_small.jsonl").exists());
    assert!(!out.join("summary.json").exists());

    // Metrics works without intervention results and leaves them out.
    let s = run_command(&cfg, Command::Metrics)
        .unwrap()
        .summary
        .unwrap();
    assert!(s.interventions.is_empty());
    assert!(!out.join("manifest.json").exists());

    run_command(&cfg, Command::Intervene).unwrap();
    assert!(out.join("interventions/add_small_operator.jsonl").exists());

    let outcome = run_command(&cfg, Command::Report).unwrap();
    assert_eq!(outcome.summary.unwrap().interventions.len(), 2);
    assert!(outcome.manifest.is_some());
}

#[test]
fn config_round_trip_and_validation() {
    let tmp = TempDir::new().unwrap();
    let model = toy_model(&tmp.path().join("model"), Family::SequentialPreNorm);
    let cfg = config(model, "out".into());
    let back = ExperimentConfig::from_json_str(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    cfg.validate().unwrap();

    let resolved = cfg.resolved(Path::new("/base"));
    assert_eq!(resolved.output_dir, Path::new("/base/out"));
    assert_eq!(resolved.model.config, cfg.model.config);
    assert_eq!(resolved.hash().unwrap(), cfg.hash().unwrap());

    let mut other = cfg.clone();
    other.k = 3;
    assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());

    let broken: [(&str, Box<dyn Fn(&mut ExperimentConfig)>); 6] = [
        ("k", Box::new(|c| c.k = 0)),
        ("no datasets", Box::new(|c| c.datasets.clear())),
        (
            "duplicate",
            Box::new(|c| {
                let d = c.datasets[0].clone();
                c.datasets.push(d)
            }),
        ),
        (
            "tokenizer",
            Box::new(|c| c.model.tokenizer_json = Some("t.json".into())),
        ),
        (
            "3-operand interventions",
            Box::new(|c| c.interventions.as_mut().unwrap().datasets = vec!["add_sub_small".into()]),
        ),
        (
            "layers",
            Box::new(|c| c.interventions.as_mut().unwrap().layers = Some([3, 2])),
        ),
    ];
    for (what, f) in broken {
        let mut c = cfg.clone();
        f(&mut c);
        let err = c.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{what}: {err}");
        assert_eq!(exit_code(&err), 1);
    }
    let unknown = cfg.to_json().unwrap().replacen("\"k\"", "\"kk\"", 1);
    assert!(ExperimentConfig::from_json_str(&unknown).is_err());
}

#[test]
fn exit_codes_by_failure_kind() {
    let tmp = TempDir::new().unwrap();
    let model = toy_model(&tmp.path().join("model"), Family::SequentialPreNorm);
    let out = tmp.path().join("out");

    let mut missing = config(model.clone(), out.clone());
    missing.model.merges = Some(tmp.path().join("absent.txt"));
    assert_eq!(exit_code(&run_experiment(&missing).unwrap_err()), 1);

    let mut multi_token = config(model.clone(), out.clone());
    multi_token.extra_targets = vec!["hello world".into()];
    assert_eq!(exit_code(&run_experiment(&multi_token).unwrap_err()), 1);

    let small_vocab = tmp.path().join("small");
    FixtureSpec::toy(Family::SequentialPreNorm, 1000)
        .write(&small_vocab)
        .unwrap();
    let mut mismatch = config(model.clone(), out.clone());
    mismatch.model.config = small_vocab.join("config.json");
    mismatch.model.weights = small_vocab.join("model.safetensors");
    let err = run_experiment(&mismatch).unwrap_err();
    assert!(matches!(err.root(), Error::VocabMismatch(_)), "{err}");
    assert_eq!(exit_code(&err), 2);

    let mut layers = config(model, out);
    layers.interventions.as_mut().unwrap().layers = Some([1, 9]);
    let err = run_experiment(&layers).unwrap_err();
    assert!(matches!(err.root(), Error::LayerOutOfRange { .. }), "{err}");
    assert_eq!(exit_code(&err), 3);
}
