//! `hme`: train, evaluate and apply hierarchical meta-embedding taggers.
//!
//! Exit codes are 0 on success, 2 for configuration or input errors and 3
//! for numerical failures. Errors are reported on stderr as a single line
//! `hme: error[<kind>]: <message>`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hme_core::HmeError;

#[derive(Parser)]
#[command(name = "hme", version, about = "Hierarchical meta-embeddings for code-switched NER")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where a trained model comes from.
#[derive(Args, Clone, Debug)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Checkpoint file written by `hme train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run config; its `output_dir` holds the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tagger and write checkpoint, metrics log and dev report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score a labeled CoNLL file; prints the report and writes it as JSON.
    Eval {
        #[command(flatten)]
        model: ModelSource,
        /// Labeled CoNLL file; defaults to the config's test, then dev set.
        data: Option<PathBuf>,
        /// JSON report path; defaults to `eval_report.json` next to the checkpoint.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Tag a CoNLL file (tags, if present, are ignored) or raw text.
    Predict {
        #[command(flatten)]
        model: ModelSource,
        input: PathBuf,
        /// Input is one sentence per line, tokens separated by whitespace.
        #[arg(long)]
        raw: bool,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Majority vote over prediction files of the same sentences.
    Ensemble {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// One score per file (e.g. dev F1); ties go to the best-scored file.
        /// Without scores, earlier files win ties.
        #[arg(long, value_delimiter = ',')]
        scores: Option<Vec<f64>>,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write per-token language attention and per-tag mean weights.
    ExportAttention {
        #[command(flatten)]
        model: ModelSource,
        /// CoNLL file; defaults to the config's test, then dev set.
        data: Option<PathBuf>,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Write a synthetic two-language corpus with configs for every variant.
    ToyData {
        dir: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        sentences: usize,
        #[arg(long, value_delimiter = ',', default_value = "xa,xb")]
        languages: Vec<String>,
    },
}

fn kind(err: &HmeError) -> &'static str {
    match err {
        _ if err.is_numerical() => "numerical",
        HmeError::Io { .. } => "io",
        HmeError::Format { .. } => "format",
        HmeError::Config(_) => "config",
        HmeError::LabelMismatch(_) => "labels",
        HmeError::Invalid(_) | HmeError::Autodiff(_) => "input",
        HmeError::Numerical(_) | HmeError::Diverged { .. } => "numerical",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            output_dir,
        } => commands::train(&config, seed, output_dir),
        Command::Eval { model, data, json } => commands::eval(&model, data, json),
        Command::Predict {
            model,
            input,
            raw,
            output,
        } => commands::predict(&model, &input, raw, output),
        Command::Ensemble { files, scores, output } => commands::ensemble(&files, scores, output),
        Command::ExportAttention {
            model,
            data,
            output_dir,
        } => commands::export_attention(&model, data, &output_dir),
        Command::ToyData {
            dir,
            seed,
            sentences,
            languages,
        } => commands::toy_data(&dir, seed, sentences, languages),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = err.to_string().replace(['\n', '\r'], " ");
            eprintln!("hme: error[{}]: {message}", kind(&err));
            ExitCode::from(if err.is_numerical() { 3 } else { 2 })
        }
    }
}
