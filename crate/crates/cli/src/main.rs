//! `adenorm` command-line pipeline.
//!
//! Exit codes: 0 success, 1 usage or flag errors (including unreadable input
//! paths), 2 malformed or inconsistent data. Diagnostics go to stderr; data
//! goes to files or stdout.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use adenorm::{Aggregation, DecodeMode, MatchMode, DEFAULT_K};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adenorm", version, about = "Zero-shot adverse drug event normalization")]
struct Cli {
    /// Worker threads for per-mention fan-out (defaults to the number of CPUs).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Reciprocal-rank fusion constant.
    #[arg(long, global = true, default_value_t = DEFAULT_K, value_parser = parse_k)]
    k: f64,
    /// How fused LLTs become a preferred term.
    #[arg(long, global = true, default_value = "top-llt", value_parser = parse_from_str::<Aggregation>)]
    aggregation: Aggregation,
    /// Span matching rule for evaluation.
    #[arg(long = "match", global = true, default_value = "overlap", value_parser = parse_from_str::<MatchMode>)]
    match_mode: MatchMode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode BIO token labels into mention spans.
    Decode {
        #[arg(long)]
        input: PathBuf,
        /// Output file (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
        /// `lenient` repairs an I without a preceding B; `strict` rejects it.
        #[arg(long, default_value = "lenient", value_parser = parse_from_str::<DecodeMode>)]
        mode: DecodeMode,
    },
    /// Embed texts with the deterministic hashing embedder.
    EmbedFixture {
        /// JSON Lines with an id and a text field per line.
        #[arg(long, required_unless_present = "terminology", conflicts_with = "terminology")]
        input: Option<PathBuf>,
        /// Embed the LLT texts of a terminology TSV, keyed by llt_code.
        #[arg(long)]
        terminology: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        dim: u32,
        #[arg(long, default_value = "id")]
        id_field: String,
        #[arg(long, default_value = "text")]
        text_field: String,
    },
    /// Link each mention to a preferred term.
    Normalize {
        #[command(flatten)]
        config: PipelineArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dump the top fused LLTs of each mention.
    Rank {
        #[command(flatten)]
        config: PipelineArgs,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        top_n: u32,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Training annotations; their PT codes define the unseen subset.
        #[arg(long)]
        train_gold: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    terminology: PathBuf,
    /// Term embedding file, one per encoder (repeatable).
    #[arg(long = "term-embeddings", required = true)]
    term_embeddings: Vec<PathBuf>,
    /// Mention embedding file, one per encoder in the same order (repeatable).
    #[arg(long = "mention-embeddings", required = true)]
    mention_embeddings: Vec<PathBuf>,
    #[arg(long)]
    mentions: PathBuf,
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn parse_k(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(k) if k.is_finite() && k > 0.0 => Ok(k),
        _ => Err(format!("`{s}` is not a positive finite number")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adenorm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
