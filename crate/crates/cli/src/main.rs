//! `gesel`: selects agent trajectories by how much a guideline helps the model predict them.
//!
//! Exit codes: 0 success (warnings included), 1 usage, 2 file or parse
//! error, 3 backend failure after retries, 4 environment failure. Every
//! nonzero exit writes one `error:<code>: <message>` line to stderr.

mod commands;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gesel::model::{GeSign, Strategy};

#[derive(Parser, Debug)]
#[command(
    name = "gesel",
    version,
    about = "Score, select and annotate agent trajectories by guideline effectiveness"
)]
pub struct Cli {
    /// Log progress at info level on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Score every trajectory with and without the guideline.
    Score(ScoreArgs),
    /// Select k questions with one of the five strategies.
    Select(SelectArgs),
    /// Write the review report for the m lowest-GE questions.
    Report(ReportArgs),
    /// Roll out trajectories for selected questions under a guideline.
    Annotate(AnnotateArgs),
    /// Export trajectories as chat-format SFT records.
    Export(ExportArgs),
    /// Print average turns and reward, plus difficulty shift of a selection.
    Stats(StatsArgs),
    /// Embed question texts for facility-location selection.
    Embed(EmbedArgs),
    /// Generate a synthetic shop question pool with its ground truth.
    MakeToyshop(MakeToyshopArgs),
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Question pool (JSONL).
    #[arg(long)]
    pub pool: PathBuf,
    /// Recorded trajectories (JSONL); the first per question is scored.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Guideline text file.
    #[arg(long)]
    pub guideline: PathBuf,
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output score file (JSONL, sorted by question id).
    #[arg(long)]
    pub out: PathBuf,
    /// Score only the prompt without the guideline (GE is then 0).
    #[arg(long)]
    pub no_guideline_only: bool,
    /// Worker threads (default: config, else 4).
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Response cache directory (default: config cache_dir, else .ge-cache).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Stored GE sign: facilitation (positive = guideline helps) or
    /// hindrance (its negation).
    #[arg(long)]
    pub ge_sign: Option<GeSign>,
    /// Diagnostics sidecar (default: <out>.diagnostics.jsonl).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    /// Score file from `score`.
    #[arg(long)]
    pub scores: PathBuf,
    /// ge | random | entropy | highscore | fl
    #[arg(long)]
    pub strategy: Strategy,
    /// Number of questions to select.
    #[arg(short = 'k', default_value_t = 800)]
    pub k: usize,
    /// Seed for the sampling strategies.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trajectories with rewards (needed by highscore).
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Question embeddings (needed by fl).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Pool to sample from for random (default: the scored questions).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Output selection file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Number of lowest-GE questions to include.
    #[arg(short = 'm', default_value_t = 30)]
    pub m: usize,
    /// Output markdown file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Toyshop,
    Replay,
    Http,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    /// Selection file, or a question pool (JSONL).
    #[arg(long)]
    pub questions: PathBuf,
    /// Pool holding the question texts when --questions is a selection.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Guideline used for the rollouts.
    #[arg(long)]
    pub guideline: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub env: EnvKind,
    /// Base URL for --env http.
    #[arg(long)]
    pub env_url: Option<String>,
    /// Recorded trajectories for --env replay.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Turn cap per episode (default: config, else 15).
    #[arg(long)]
    pub tmax: Option<usize>,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Output trajectories (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Diagnostics sidecar (default: <out>.diagnostics.jsonl).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Instruction text file.
    #[arg(long)]
    pub instruction: PathBuf,
    #[arg(long)]
    pub guideline: PathBuf,
    /// Output SFT file (JSONL, one conversation per line).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Selection whose difficulty mix is compared with --pool.
    #[arg(long, requires = "pool")]
    pub selected: Option<PathBuf>,
    /// Pool with `level` metadata.
    #[arg(long, requires = "selected")]
    pub pool: Option<PathBuf>,
    /// Also write the JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// Run configuration; without one, the offline hash embedder is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Output embeddings (JSONL).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MakeToyshopArgs {
    /// Shop settings come from the config's `toyshop` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of questions.
    #[arg(long, default_value_t = 300)]
    pub questions: usize,
    /// Output pool (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Output ground truth (JSON object keyed by question id).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("usage error");
            eprintln!("error:1: {}", first.trim_start_matches("error: "));
            eprint!(
                "{}",
                rendered
                    .split_once('\n')
                    .map(|(_, rest)| rest)
                    .unwrap_or("")
            );
            return ExitCode::from(1);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .with_max_level(if cli.verbose {
            tracing::Level::INFO
        } else {
            tracing::Level::WARN
        })
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut msg = f.error.to_string();
            for cause in f.error.chain().skip(1) {
                let cause = cause.to_string();
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error:{}: {msg}", f.code);
            ExitCode::from(f.code)
        }
    }
}
