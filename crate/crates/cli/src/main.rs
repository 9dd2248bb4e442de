use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use equirag::corpus::{ingest_documents, merge_corpora, read_documents, MANIFEST_FILE};
use equirag::harness::{
    compare_reports, load_report, recompute_report, run_ablation_suite, run_experiment, ExperimentConfig, ReportFormat, RunError, SweepGrid,
};
use equirag::{Bm25Index, ChunkConfig, SnippetStore, Source};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "equirag", version, about = "Fairness evaluation for retrieval-augmented medical QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a directory of documents into a snippet store (merging into an existing one).
    Ingest {
        #[arg(long)]
        source: Source,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        window: usize,
        #[arg(long, default_value_t = 512)]
        stride: usize,
        #[arg(long, default_value = "medcorp")]
        name: String,
    },
    /// Build a BM25 index file for a snippet store.
    Index {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every cell of an ablation grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Print a run's report.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
        /// Rebuild from records.jsonl and audit.jsonl instead of reading report.json.
        #[arg(long)]
        recompute: bool,
    },
    /// Compare the headline metrics of two runs.
    Compare {
        #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
        runs: Vec<PathBuf>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

fn ingest(source: Source, input: &Path, out: &Path, chunk: ChunkConfig, name: &str) -> anyhow::Result<()> {
    let docs = read_documents(source, input)?;
    let snippets = ingest_documents(&docs, &chunk)?;
    let added = snippets.len();
    let mut store = SnippetStore::new(name, chunk, snippets)?;
    if out.join(MANIFEST_FILE).exists() {
        let existing = SnippetStore::load(out).with_context(|| format!("loading existing store {}", out.display()))?;
        store = merge_corpora(vec![existing, store], name)?;
    }
    store.write(out)?;
    println!(
        "{source}: {} documents, {added} snippets added, {} in store",
        docs.len(),
        store.len()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest {
            source,
            input,
            out,
            window,
            stride,
            name,
        } => {
            let chunk = ChunkConfig::new(window, stride).map_err(config_error)?;
            ingest(source, &input, &out, chunk, &name)?;
        }
        Command::Index { store, out, k1, b } => {
            let store = SnippetStore::load(&store).map_err(anyhow::Error::from)?;
            let idx = Bm25Index::build(&store, k1, b).map_err(anyhow::Error::from)?;
            idx.save(&out).map_err(anyhow::Error::from)?;
            println!("indexed {} snippets into {}", idx.num_docs(), out.display());
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config).map_err(config_error)?;
            let summary = run_experiment(cfg)?;
            println!("{}", summary.report.to_markdown());
            println!("run directory: {}", summary.run_dir.display());
        }
        Command::Sweep { config, grid } => {
            let cfg = ExperimentConfig::load(&config).map_err(config_error)?;
            let grid = SweepGrid::load(&grid).map_err(config_error)?;
            let summary = run_ablation_suite(&cfg, &grid)?;
            println!("{}", summary.table.to_markdown());
            println!("sweep directory: {}", summary.sweep_dir.display());
        }
        Command::Report { run, format, recompute } => {
            let report = if recompute { recompute_report(&run)? } else { load_report(&run)? };
            print!("{}", report.render(format));
        }
        Command::Compare { runs } => {
            let a = load_report(&runs[0])?;
            let b = load_report(&runs[1])?;
            print!("{}", compare_reports(&a, &b));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
