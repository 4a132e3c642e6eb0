// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use arithlens::fixture::FixtureSpec;
use arithlens::model::Family;
use arithlens::report::{self, Command, ExperimentConfig};
use arithlens::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Layer-by-layer decoding of arithmetic prompts.
#[derive(Parser)]
#[command(name = "arithlens", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the configured datasets.
    GenData(RunArgs),
    /// Generate datasets and sweep the lens over them.
    Lens(RunArgs),
    /// Aggregate cached lens records into CSVs and summary.json.
    Metrics(RunArgs),
    /// Run the configured interchange interventions.
    Intervene(RunArgs),
    /// Write the full bundle from cached artifacts, without loading the model.
    Report(RunArgs),
    /// Run every stage, reusing valid cached artifacts.
    Run(RunArgs),
    /// Write a small random checkpoint for smoke runs.
    MakeFixture(FixtureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Relative paths inside resolve against its
    /// directory.
    #[arg(long, short, env = "ARITHLENS_CONFIG")]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Top-k stored per site.
    #[arg(long)]
    k: Option<usize>,
    /// Also write SVG figures.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    merges: Option<PathBuf>,
    #[arg(long)]
    tokenizer_json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gpt2,
    Neox,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, value_enum, default_value = "gpt2")]
    family: FamilyArg,
    /// Must cover the tokenizer it will be paired with.
    #[arg(long, default_value_t = 50257)]
    vocab_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Directory receiving config.json and model.safetensors.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let base = args
        .config
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut cfg = ExperimentConfig::load(&args.config)?.resolved(&base);
    // Flag values are relative to the working directory, not the config.
    if let Some(p) = &args.output_dir {
        cfg.output_dir = p.clone();
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if args.svg {
        cfg.svg = true;
    }
    let m = &mut cfg.model;
    if let Some(id) = &args.model_id {
        m.id = id.clone();
    }
    if let Some(p) = &args.model_config {
        m.config = p.clone();
    }
    if let Some(p) = &args.weights {
        m.weights = p.clone();
    }
    if args.tokenizer_json.is_some() {
        m.tokenizer_json = args.tokenizer_json.clone();
        m.vocab = None;
        m.merges = None;
    }
    if args.vocab.is_some() || args.merges.is_some() {
        m.tokenizer_json = None;
        m.vocab = args.vocab.clone().or(m.vocab.take());
        m.merges = args.merges.clone().or(m.merges.take());
    }
    Ok(cfg)
}

fn run(args: &RunArgs, command: Command) -> Result<(), Error> {
    let cfg = load_config(args).map_err(|e| e.in_stage("config", None))?;
    let pool = report::worker_pool().map_err(|e| e.in_stage("config", None))?;
    let outcome = pool.install(|| report::run_command(&cfg, command))?;
    if let Some(summary) = &outcome.summary {
        for d in &summary.datasets {
            println!(
                "{}: {} queries, accuracy {:.4}",
                d.name, d.n_queries, d.accuracy
            );
        }
    }
    println!("wrote {}", outcome.output_dir.display());
    Ok(())
}

fn make_fixture(args: &FixtureArgs) -> Result<(), Error> {
    let family = match args.family {
        FamilyArg::Gpt2 => Family::SequentialPreNorm,
        FamilyArg::Neox => Family::ParallelRotary,
    };
    FixtureSpec::toy(family, args.vocab_size)
        .with_seed(args.seed)
        .write(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::GenData(a) => run(a, Command::GenData),
        Cmd::Lens(a) => run(a, Command::Lens),
        Cmd::Metrics(a) => run(a, Command::Metrics),
        Cmd::Intervene(a) => run(a, Command::Intervene),
        Cmd::Report(a) => run(a, Command::Report),
        Cmd::Run(a) => run(a, Command::Run),
        Cmd::MakeFixture(a) => make_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(report::exit_code(&e) as u8)
        }
    }
}
