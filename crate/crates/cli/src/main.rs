//! `elm`: train, index, route, merge and evaluate expert models.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expert_lm::eval::EvalError;
use expert_lm::keys::{KeyError, TextFormat};
use expert_lm::library::{ExpertKind, LibraryError, DEFAULT_QUERIES, DEFAULT_SAMPLES_PER_EXPERT};
use expert_lm::model::ModelError;
use expert_lm::params::ParamError;
use expert_lm::tuner::TunerError;

use artifacts::EmbedChoice;

#[derive(Parser)]
#[command(name = "elm", version, about = "Train, index, route, merge and evaluate expert models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic task suite as `<task>.<split>.jsonl` files.
    GenTasks(GenTasks),
    /// Create a randomly initialized base model and its config sidecar.
    InitBase(InitBase),
    /// Train an adapter (pe) or fully fine-tuned (de) expert on one task file.
    TrainExpert(TrainExpert),
    /// Build an expert library from every registered expert's training data.
    BuildLibrary(BuildLibrary),
    /// Append one expert's keys to an existing library.
    AddExpert(AddExpert),
    /// Route a target task to an expert; prints the decision as JSON.
    Route(Route),
    /// Merge experts with given, searched or uniform coefficients.
    Merge(Merge),
    /// Evaluate one expert or merged model on task files.
    Eval(Eval),
    /// Evaluate every registered expert and print a ranking table.
    RankExperts(RankExperts),
}

#[derive(Args)]
struct GenTasks {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 12)]
    families: usize,
    #[arg(long, default_value_t = 4)]
    prompts: usize,
    /// Training instances per task; validation and test get a quarter each.
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 0.1)]
    overlap: f64,
    #[arg(long, default_value_t = 0)]
    generative_families: usize,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    /// Also write copy, reverse and copy-then-reverse sequence tasks.
    #[arg(long)]
    sequence_tasks: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InitBase {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    adapter_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainExpert {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: ExpertKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    /// Expert id; defaults to the task name.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Defaults to 50,000 for classification and 10,000 for generative tasks.
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildLibrary {
    #[arg(long)]
    registry: PathBuf,
    /// Directory holding `<task>.train.jsonl` for every expert.
    #[arg(long)]
    tasks_dir: PathBuf,
    #[arg(long = "S", default_value_t = DEFAULT_SAMPLES_PER_EXPERT)]
    samples: usize,
    #[arg(long, default_value_t = TextFormat::E)]
    format: TextFormat,
    /// `builtin` or `external:<vectors.jsonl>`.
    #[arg(long, default_value = "builtin")]
    embed: EmbedChoice,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AddExpert {
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    expert: String,
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value = "builtin")]
    embed: EmbedChoice,
}

#[derive(Args)]
struct Route {
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long = "Q", default_value_t = DEFAULT_QUERIES)]
    queries: usize,
    #[arg(long, default_value = "builtin")]
    embed: EmbedChoice,
    /// When given, every library entry must name a registered expert.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Merge {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    experts: Vec<String>,
    #[arg(long, num_args = 1.., conflicts_with = "search")]
    lambdas: Option<Vec<f64>>,
    /// Validation task file for coefficient search.
    #[arg(long)]
    search: Option<PathBuf>,
    /// Comma-separated candidate coefficients for the search.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Evaluate at most this many validation instances per search point.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Search log path; defaults to `<out>.search.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    base: PathBuf,
    /// Expert or merged parameter file.
    #[arg(long, conflicts_with = "decision")]
    params: Option<PathBuf>,
    /// Routing decision JSON; the chosen expert is looked up in the registry.
    #[arg(long, requires = "registry")]
    decision: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    tasks: Vec<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RankExperts {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    tasks: Vec<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    /// Also write the full ranking with per-task rows as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_kind(s: &str) -> Result<ExpertKind, String> {
    match s {
        "pe" => Ok(ExpertKind::Pe),
        "de" => Ok(ExpertKind::De),
        _ => Err(format!("expected `pe` or `de`, got `{s}`")),
    }
}

/// Name of the innermost library error variant behind `err`, if any.
fn variant_name(err: &anyhow::Error) -> Option<String> {
    const WRAPPERS: [&str; 3] = ["Key", "Params", "Model"];
    for cause in err.chain() {
        let debug = if let Some(e) = cause.downcast_ref::<LibraryError>() {
            format!("{e:?}")
        } else if let Some(e) = cause.downcast_ref::<ParamError>() {
            format!("{e:?}")
        } else if let Some(e) = cause.downcast_ref::<ModelError>() {
            format!("{e:?}")
        } else if let Some(e) = cause.downcast_ref::<KeyError>() {
            format!("{e:?}")
        } else if let Some(e) = cause.downcast_ref::<EvalError>() {
            format!("{e:?}")
        } else if let Some(e) = cause.downcast_ref::<TunerError>() {
            format!("{e:?}")
        } else {
            continue;
        };
        let mut rest = debug.as_str();
        loop {
            let end = rest.find(|c: char| !c.is_alphanumeric() && c != '_').unwrap_or(rest.len());
            let name = &rest[..end];
            if WRAPPERS.contains(&name) && rest[end..].starts_with('(') {
                rest = &rest[end + 1..];
                continue;
            }
            return Some(name.to_string());
        }
    }
    None
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTasks(a) => commands::gen_tasks(a),
        Command::InitBase(a) => commands::init_base(a),
        Command::TrainExpert(a) => commands::train_expert(a),
        Command::BuildLibrary(a) => commands::build_library(a),
        Command::AddExpert(a) => commands::add_expert(a),
        Command::Route(a) => commands::route(a),
        Command::Merge(a) => commands::merge(a),
        Command::Eval(a) => commands::eval(a),
        Command::RankExperts(a) => commands::rank_experts(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match variant_name(&err) {
                Some(v) => eprintln!("error[{v}]: {err:#}"),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(1)
        }
    }
}
