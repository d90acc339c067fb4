//! `depscreen` — command-line surface for every pipeline stage plus the
//! webhook inference service.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "depscreen",
    version,
    about = "Tri-modal (audio / facial-action / text) depression screening toolkit"
)]
struct Cli {
    /// TOML configuration file; omitted sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the on-disk layout.
    Synth {
        /// Number of interviews (>= 2).
        #[arg(long)]
        n: usize,
        /// Fraction of depressed subjects, strictly between 0 and 1.
        #[arg(long, default_value_t = 0.3)]
        fraction: f64,
        /// Corpus output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Load a corpus, apply the error manifest, and write normalized
    /// transcripts plus rendered dialogues.
    Prep {
        #[arg(long)]
        corpus: PathBuf,
        /// Error manifest; defaults to <corpus>/error_manifest.toml when
        /// present.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Two-column acronym table; defaults to the built-in entries.
        #[arg(long)]
        acronyms: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the audio + visual feature store.
    Features {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        acronyms: Option<PathBuf>,
        /// Interview ids to skip (normally the text-model exemplars).
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<u32>,
        /// Feature store output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify every transcript through the text backend; writes a
    /// verdicts file carrying the exemplar set.
    LlmClassify {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        acronyms: Option<PathBuf>,
        /// Exactly four interview ids (two per class) used as few-shot
        /// exemplars and excluded from classification.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        exemplar_ids: Vec<u32>,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once on a split and save a checkpoint (+ history).
    Train {
        /// Feature store directory.
        #[arg(long)]
        store: PathBuf,
        /// Verdicts file from llm-classify.
        #[arg(long)]
        verdicts: PathBuf,
        /// Hyperparameters TOML; defaults to the tuned configuration.
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        /// Split CSVs (first column = participant id). All three or none;
        /// when absent a seeded 60/20/20 split is derived.
        #[arg(long)]
        split_train: Option<PathBuf>,
        #[arg(long)]
        split_val: Option<PathBuf>,
        #[arg(long)]
        split_test: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        max_epochs: usize,
        /// Output directory (checkpoint.dsck, history.csv, scaler.toml).
        #[arg(long)]
        out: PathBuf,
    },
    /// Hyperband hyperparameter search; exports the best configuration and
    /// the trial log.
    Tune {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        /// Search space TOML; defaults to the full option grid.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, default_value_t = 27)]
        max_resource: u32,
        #[arg(long, default_value_t = 3)]
        eta: u32,
        #[arg(long, default_value_t = 2)]
        iterations: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-subject-out cross-validation with a pooled report.
    Losocv {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        max_epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-split evaluation (train once, evaluate the test split).
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        verdicts: PathBuf,
        #[arg(long)]
        hyperparams: Option<PathBuf>,
        #[arg(long)]
        split_train: Option<PathBuf>,
        #[arg(long)]
        split_val: Option<PathBuf>,
        #[arg(long)]
        split_test: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        max_epochs: usize,
        /// Also print the reference-results consistency report.
        #[arg(long)]
        show_reference: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the full single-interview pipeline (informational).
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: u32,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        acronyms: Option<PathBuf>,
    },
    /// Run the webhook-driven inference service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report store directory (persists across restarts).
        #[arg(long)]
        reports: PathBuf,
        /// Listen address; defaults to the config value.
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        acronyms: Option<PathBuf>,
    },
    /// POST a signed webhook to a running service (the conferencing-
    /// platform simulator).
    SimulateWebhook {
        /// Service base URL, e.g. http://127.0.0.1:8080
        #[arg(long)]
        url: String,
        /// Corpus root the service should read the recording from.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: u32,
        /// Secret; defaults to the DEPSCREEN_WEBHOOK_SECRET variable.
        #[arg(long)]
        secret: Option<String>,
        /// Corrupt the body after signing to demonstrate rejection.
        #[arg(long)]
        tamper: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
