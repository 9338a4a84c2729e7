use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqsleep::cli::{
    cmd_evaluate, cmd_personalize, cmd_preprocess, cmd_pretrain, cmd_synthesize, workers_from_env, CliError,
    ExperimentConfig, WORKERS_ENV,
};

/// Sequence-to-sequence sleep staging with single-night personalization.
#[derive(Parser)]
#[command(version, after_help = format!("Worker threads: set {WORKERS_ENV} (default 1)."))]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set personalize.alphas=[0.4]`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic cohort as EDF files.
    Synthesize,
    /// Turn recordings into normalized spectrogram caches.
    Preprocess,
    /// Train the subject-independent model.
    Pretrain,
    /// Finetune the subject-independent model on a subject's first night.
    Personalize {
        #[arg(long)]
        subject: Option<String>,
    },
    /// Score subject-independent and personalized models on second nights.
    Evaluate {
        #[arg(long)]
        subject: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let workers = workers_from_env()?;
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Synthesize => cmd_synthesize(&cfg, &mut out).map(drop),
        Command::Preprocess => cmd_preprocess(&cfg, &mut out).map(drop),
        Command::Pretrain => cmd_pretrain(&cfg, &mut out).map(drop),
        Command::Personalize { subject } => cmd_personalize(&cfg, subject.as_deref(), workers, &mut out).map(drop),
        Command::Evaluate { subject } => cmd_evaluate(&cfg, subject.as_deref(), &mut out).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
