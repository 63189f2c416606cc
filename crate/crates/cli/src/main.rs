mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparc_core::SparcError;
use thiserror::Error;

use config::Overrides;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] SparcError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => e.exit_code() as u8,
        }
    }
}

/// Subspace-aware soft-prompt continual learning on a tiny frozen LM.
///
/// Exit codes: 0 success, 2 usage, 3 data or file error, 4 numerical degeneracy.
/// Set SPARC_LOG=debug|info for logging.
#[derive(Debug, Parser)]
#[command(name = "sparc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trainer: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    tau_align: Option<f64>,
    #[arg(long)]
    tau_reuse: Option<f64>,
    /// Accept JSONL files with malformed lines, skipping them.
    #[arg(long)]
    lenient: bool,
    /// Override any config field, e.g. `--set run.epochs=4`.
    #[arg(long, value_name = "KEY=JSON")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self, out: Option<PathBuf>) -> Overrides {
        Overrides {
            seed: self.seed,
            trainer: self.trainer.clone(),
            mode: self.mode.clone(),
            k: self.k,
            tokens: self.tokens,
            tau_align: self.tau_align,
            tau_reuse: self.tau_reuse,
            out,
            set: self.set.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a base model on the configured domains and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a continual-learning sequence and write its reports.
    Run {
        #[command(flatten)]
        common: Common,
        /// Base model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise subspace overlap between datasets.
    AnalyzeOverlap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// JSONL files, comma separated; configured domains are added first.
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<PathBuf>,
        /// Kind of the JSONL files.
        #[arg(long, default_value = "lm")]
        kind: String,
        /// Alignment threshold (defaults to tau_align).
        #[arg(long)]
        tau: Option<f64>,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render markdown and CSV summaries of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured generated domains as JSONL files.
    ExportData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { common, out } => commands::pretrain(&common, out),
        Command::Run { common, model, out } => commands::run(&common, &model, out),
        Command::AnalyzeOverlap {
            common,
            model,
            datasets,
            kind,
            tau,
            out,
        } => commands::analyze_overlap(&common, &model, &datasets, &kind, tau, out),
        Command::Report { run_dir, out } => {
            report::render(&run_dir, out.as_deref().unwrap_or(&run_dir))
        }
        Command::ExportData { common, out } => commands::export_data(&common, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPARC_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
