//! `ncp`: data preparation, corpus statistics, training, parsing, evaluation
//! and headedness analysis for the combinatory parser.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ncp_core::combinator::{CombinatorError, Mode};
use ncp_core::embeddings::EmbeddingError;
use ncp_core::eval::EvalError;
use ncp_core::stratify::{FactorPolicy, RelayLabels};
use ncp_core::synth::Branching;
use ncp_core::train::TrainError;
use ncp_core::treebank::TreebankError;

#[derive(Parser)]
#[command(name = "ncp", version, about = "Neural combinatory constituency parser")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic treebank from the bundled grammar.
    Generate(GenerateArgs),
    /// Binarize a treebank and optionally write its stratified layers.
    Binarize(BinarizeArgs),
    /// Orientation frequencies, compression ratios and complexity fits.
    Stats(StatsArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Parse sentences with a trained model.
    Parse(ParseArgs),
    /// Score predicted trees against gold trees.
    Eval(EvalArgs),
    /// Attention-based headedness table.
    Heads(HeadsArgs),
    /// Print the default run configuration.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchingArg {
    Right,
    Left,
}

impl From<BranchingArg> for Branching {
    fn from(b: BranchingArg) -> Self {
        match b {
            BranchingArg::Right => Branching::Right,
            BranchingArg::Left => Branching::Left,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RelayArg {
    /// `_` + parent label.
    Sub,
    /// Relays repeat their own label.
    Repeat,
}

impl From<RelayArg> for RelayLabels {
    fn from(r: RelayArg) -> Self {
        match r {
            RelayArg::Sub => RelayLabels::Sub,
            RelayArg::Repeat => RelayLabels::Repeat,
        }
    }
}

/// A treebank on disk or a freshly sampled synthetic one.
#[derive(Args)]
struct CorpusArgs {
    /// Bracketed treebank file or directory.
    #[arg(long, short, required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Sample this many synthetic sentences instead of reading a treebank.
    #[arg(long, conflicts_with = "input")]
    synthetic: Option<usize>,
    #[arg(long, value_enum, default_value = "right")]
    branching: BranchingArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 500)]
    sentences: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "right")]
    branching: BranchingArg,
    /// Output file (default: stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BinarizeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// `left`, `right`, `midin`, `midout` or `L<p>R<q>`.
    #[arg(long, default_value = "right")]
    factor: FactorPolicy,
    #[arg(long, default_value = "binary")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "sub")]
    relay: RelayArg,
    /// Bracketed output (default: stdout).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Also write one JSON stratified sample per line here.
    #[arg(long)]
    layers: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Restrict to one factor (default: all four plus multi-branching).
    #[arg(long)]
    factor: Option<FactorPolicy>,
    /// Also print compression ratios per layer length.
    #[arg(long)]
    by_length: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration (default: built-in defaults).
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    factor: Option<FactorPolicy>,
    /// Where to write the best checkpoint.
    #[arg(long, short, default_value = "model.ckpt")]
    output: PathBuf,
    /// Tab-separated per-epoch log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long, short)]
    model: PathBuf,
    /// Treebank whose yields are parsed.
    #[arg(long, short, conflicts_with = "text")]
    input: Option<PathBuf>,
    /// One whitespace-tokenized sentence per line (default: stdin).
    #[arg(long)]
    text: Option<PathBuf>,
    /// Decode the gold signals of `--input` instead of predicting them.
    #[arg(long, requires = "input")]
    oracle: bool,
    /// Factor used to derive oracle signals.
    #[arg(long, default_value = "right")]
    factor: FactorPolicy,
    #[arg(long, value_enum, default_value = "repeat")]
    relay: RelayArg,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// One JSON validity record per sentence.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, short)]
    gold: PathBuf,
    #[arg(long, short)]
    pred: PathBuf,
    /// Run configuration supplying the `[eval]` conventions.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Print the score as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct HeadsArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[arg(long, short)]
    input: PathBuf,
    /// Use gold signals instead of predictions.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value = "right")]
    factor: FactorPolicy,
    #[arg(long, value_enum, default_value = "repeat")]
    relay: RelayArg,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

/// Process exit codes.
mod exit {
    pub const FAILURE: u8 = 1;
    pub const IO: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const DIMENSION: u8 = 5;
    pub const DATA: u8 = 6;
    pub const MODEL: u8 = 7;
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Config(_) => exit::CONFIG,
                TrainError::Io { .. } => exit::IO,
                TrainError::Embedding(EmbeddingError::Dimension { .. })
                | TrainError::Model(CombinatorError::EmbeddingDim { .. }) => exit::DIMENSION,
                TrainError::Embedding(EmbeddingError::Io { .. })
                | TrainError::Treebank(TreebankError::Io { .. }) => exit::IO,
                TrainError::Model(CombinatorError::Config(_)) => exit::CONFIG,
                TrainError::Model(_) => exit::MODEL,
                _ => exit::DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<TreebankError>() {
            return match e {
                TreebankError::Io { .. } => exit::IO,
                _ => exit::DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<CombinatorError>() {
            return match e {
                CombinatorError::Checkpoint(ncp_core::autodiff::CheckpointError::Io(_)) => exit::IO,
                _ => exit::MODEL,
            };
        }
        if cause.downcast_ref::<EvalError>().is_some() {
            return exit::DATA;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::FAILURE);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Binarize(a) => commands::binarize(a),
        Command::Stats(a) => commands::stats(a),
        Command::Train(a) => commands::train(a),
        Command::Parse(a) => commands::parse(a),
        Command::Eval(a) => commands::eval(a),
        Command::Heads(a) => commands::heads(a),
        Command::Config => commands::print_config(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // downstream reader closed early (`ncp ... | head`)
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
