//! `tcgu` — condense a graph once, then unlearn deletion requests against it.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcgu_core::gnn::GnnKind;
use tcgu_core::graph::{DeletionKind, GraphFormat};

#[derive(Parser, Debug)]
#[command(name = "tcgu", version, about = "Graph unlearning with transferable condensed graphs")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the original model and pre-condense the graph (Stage 1).
    Condense(CondenseArgs),
    /// Unlearn a deletion request with the stored condensed graph (Stages 2 and 3).
    Unlearn(UnlearnArgs),
    /// Score a trained model: test micro-F1 and, optionally, membership inference.
    Eval(EvalArgs),
    /// Inject adversarial edges, unlearn them, and report the F1 curve.
    AttackEdges(AttackArgs),
    /// Write a synthetic stochastic-block-model graph.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Run configuration (TOML, or JSON by extension). Flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Graph to load: a CSV directory, a .json/.tcgu file or a citation-layout directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<GraphFormat>,
    /// Generate the graph instead: `citation-like`, `sbm`, or a JSON block-model
    /// spec. Presets are drawn with the split seed.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<String>,
    /// Seed of the train/val/test split.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Keep the masks stored in the data file.
    #[arg(long)]
    pub keep_split: bool,
    #[arg(long, value_parser = parse_gnn)]
    pub gnn: Option<GnnKind>,
}

#[derive(Args, Debug)]
pub struct CondenseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Condensation ratio N'/|train|.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Condensation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct UnlearnArgs {
    /// Directory (or stage1.tcgu file) written by `tcgu condense`.
    #[arg(long)]
    pub stage1: PathBuf,
    /// Overrides the configuration stored with the Stage-1 artifacts.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Deletion request as JSON; sampled from the training set when absent.
    #[arg(long, conflicts_with = "sequential")]
    pub request: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind, default_value = "node")]
    pub kind: DeletionKind,
    /// Share of training nodes (or of edges) to delete.
    #[arg(long, default_value_t = 0.2)]
    pub ratio: f64,
    /// Cumulative batches, e.g. `5x0.05`.
    #[arg(long, value_parser = config::parse_sequential)]
    pub sequential: Option<(usize, f64)>,
    /// Run membership inference against the unlearned model.
    #[arg(long)]
    pub mia: bool,
    /// Also retrain from scratch on the remaining graph for comparison.
    #[arg(long)]
    pub baseline: bool,
    /// Number of repetitions; seeds run from --seed upward.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for repetitions. Timings are only comparable with 1.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub stage1: PathBuf,
    /// Model checkpoint to score; the Stage-1 original when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Deletion request the model was unlearned for.
    #[arg(long)]
    pub request: Option<PathBuf>,
    #[arg(long)]
    pub mia: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated attack ratios in (0, 1].
    #[arg(long, alias = "ratios", value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
    pub edge_attack: Vec<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// `citation-like`, `sbm`, or a JSON block-model spec.
    #[arg(long, default_value = "citation-like")]
    pub synthetic: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output format; inferred from the extension when absent.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<GraphFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_format(s: &str) -> Result<GraphFormat, String> {
    s.parse().map_err(|e: tcgu_core::Error| e.to_string())
}

fn parse_gnn(s: &str) -> Result<GnnKind, String> {
    s.parse().map_err(|e: tcgu_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<DeletionKind, String> {
    s.parse().map_err(|e: tcgu_core::Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .find_map(|e| e.downcast_ref::<tcgu_core::Error>())
        .is_some_and(|e| e.is_validation());
    if validation {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Condense(a) => commands::condense(a),
        Command::Unlearn(a) => commands::unlearn(a),
        Command::Eval(a) => commands::eval(a),
        Command::AttackEdges(a) => commands::attack_edges(a),
        Command::Generate(a) => commands::generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
