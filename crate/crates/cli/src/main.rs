//! `fever`: run pipeline stages against a work directory.
//!
//! Each subcommand runs one stage, reusing cached upstream artifacts. A stage
//! whose inputs are missing exits with status 3; run the upstream stage first.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fever_core::pipeline::{Pipeline, PipelineConfig, ScorerSpec, Stage};
use fever_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DEPENDENCY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fever", version, about = "Evidence retrieval and claim verification pipeline")]
struct Cli {
    /// JSON pipeline configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Wiki dump in JSON lines.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Claims in JSON lines.
    #[arg(long, global = true)]
    claims: Option<PathBuf>,
    /// `lexical` or `bridge:<command or tcp://host:port>`.
    #[arg(long, global = true)]
    scorer: Option<ScorerSpec>,
    #[arg(long, global = true)]
    no_fuzzy: bool,
    #[arg(long, global = true)]
    no_reretrieval: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Documents retrieved per claim from the sparse indices.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Parse the wiki dump into the corpus store.
    Ingest,
    /// Build the TF-IDF indices.
    Index,
    /// Retrieve candidate documents per claim.
    Retrieve,
    /// Score sentences and pick the top evidence.
    Select,
    /// Predict a label per claim from its evidence.
    Aggregate,
    /// Compute label accuracy, FEVER score, recall@5 and OFEVER.
    Evaluate,
    /// Grid-search the TF-IDF settings of each index layout.
    TuneTfidf,
    /// Cross-validate the aggregation GBDT grid.
    TuneGbdt,
    /// Compare retrieval layouts with and without fuzzy search and re-retrieval.
    Ablate,
    /// Write sentence-selection training pairs for an external scorer.
    ExportTraining,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::Ingest => Stage::Ingest,
            Command::Index => Stage::Index,
            Command::Retrieve => Stage::Retrieve,
            Command::Select => Stage::Select,
            Command::Aggregate => Stage::Aggregate,
            Command::Evaluate => Stage::Evaluate,
            Command::TuneTfidf => Stage::TuneTfidf,
            Command::TuneGbdt => Stage::TuneGbdt,
            Command::Ablate => Stage::Ablate,
            Command::ExportTraining => Stage::ExportTraining,
        }
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = &cli.work_dir {
        cfg.work_dir = p.clone();
    }
    if let Some(p) = &cli.corpus {
        cfg.corpus = p.clone();
    }
    if let Some(p) = &cli.claims {
        cfg.claims = p.clone();
    }
    if let Some(s) = &cli.scorer {
        cfg.scorer = s.clone();
    }
    if cli.no_fuzzy {
        cfg.fuzzy = false;
    }
    if cli.no_reretrieval {
        cfg.reretrieval = false;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.gbdt.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::MissingArtifact { .. } | Error::Wiring(_) => EXIT_DEPENDENCY,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let stage = cli.command.stage();
    let result = build_config(&cli).and_then(|cfg| Pipeline::new(cfg).run_stage(stage));
    match result {
        Ok(outcome) => {
            let status = if outcome.cache_hit { "cached" } else { "done" };
            println!("{stage} [{status}] {}", outcome.dir.display());
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
