use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::TrainArgs;
use error::{CliError, EXIT_CONFIG};

/// Multimodal sarcasm and humor classification in dialogs.
#[derive(Parser)]
#[command(name = "mshc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variant and write a checkpoint, history and report.
    Train {
        /// Run configuration (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// sarcasm | humor | joint
        #[arg(long)]
        task: Option<String>,
        /// Ablation row label, or `full`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        test_corpus: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Override any config key, `key=value`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Suppress per-epoch progress.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Score a corpus with a checkpoint and write metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Word vectors; defaults to the path stored in the checkpoint.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Per-utterance predictions and the attention heatmap of one dialog.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dialog_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the gradient checks and layer property checks.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MSHC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::new(EXIT_CONFIG, format!("MSHC_THREADS: expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("MSHC_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train {
            config,
            task,
            variant,
            seed,
            out,
            corpus,
            test_corpus,
            embeddings,
            set,
            quiet,
        } => commands::cmd_train(TrainArgs {
            config,
            task,
            variant,
            seed,
            out,
            corpus,
            test_corpus,
            embeddings,
            set,
            quiet,
        }),
        Command::Eval {
            checkpoint,
            data,
            out,
            embeddings,
            threshold,
        } => commands::cmd_eval(&checkpoint, &data, &out, embeddings.as_deref(), threshold),
        Command::Inspect {
            checkpoint,
            data,
            dialog_id,
            out,
            embeddings,
            threshold,
        } => commands::cmd_inspect(&checkpoint, &data, &dialog_id, &out, embeddings.as_deref(), threshold),
        Command::Verify { inject_fault } => commands::cmd_verify(inject_fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
