mod prepare;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "klink", version, about = "Knowledge-linked graph learning for multivariate time series")]
struct Cli {
    /// Repeat for more log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw corpus into normalized split files.
    PrepareData(PrepareArgs),
    /// Write every sensor and label prompt of a prepared dataset, one per line.
    EmitPrompts(PromptArgs),
    /// Train one model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared dataset.
    Eval(EvalArgs),
    /// Train the full model and the six ablated variants over the configured seeds.
    Ablate(AblateArgs),
    /// Sweep one loss weight over the fixed grid.
    Sweep(SweepArgs),
    /// Finite-difference check of the combined training loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    /// C-MAPSS subset directory (train_*, test_*, RUL_* files).
    Cmapss,
    /// TOML synthetic corpus spec.
    Synthetic,
    /// JSONL file of samples.
    Samples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskKind {
    Regression,
    Classification,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    format: Format,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// C-MAPSS subset name.
    #[arg(long, default_value = "FD002")]
    subset: String,
    /// C-MAPSS window length.
    #[arg(long, default_value_t = 50)]
    window: usize,
    /// C-MAPSS window stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// C-MAPSS fraction of training units held out for validation.
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Task of a sample file.
    #[arg(long, value_enum)]
    task: Option<TaskKind>,
    /// Comma-separated class names of a classification sample file.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Phrase used in label prompts.
    #[arg(long)]
    category: Option<String>,
    /// Train, validation and test fractions of a sample file.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.1, 0.2])]
    ratios: Vec<f64>,
    /// Width of the synthetic prompt-embedding table.
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// Seed of the synthetic prompt-embedding table.
    #[arg(long, default_value_t = 11)]
    embedding_seed: u64,
}

#[derive(Args)]
struct PromptArgs {
    /// Config supplying the dataset directory and patch size.
    #[arg(long)]
    config: PathBuf,
    /// Prepared dataset directory, overriding the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Label-prompt phrase, overriding the dataset's.
    #[arg(long)]
    category: Option<String>,
    /// Also emit the index-named sensor prompts of the index_prompt variant.
    #[arg(long)]
    index_prompts: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Prepared dataset directory, overriding the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Single seed, overriding the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding table file, overriding the config.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embed prompts missing from the table with the deterministic fallback.
    #[arg(long)]
    fallback_embeddings: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Ablation variant replacing the configured switches.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory, overriding the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Loss weight to sweep: S (sensor level), L (label level) or E (edge).
    #[arg(long, value_parser = ["S", "L", "E"])]
    lambda: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Take architecture, embedding width and loss weights from a config
    /// instead of the built-in small setup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::PrepareData(a) => prepare::prepare_data(&a),
        Command::EmitPrompts(a) => prepare::emit_prompts(&a),
        Command::Train(a) => run::train(&a, &argv),
        Command::Eval(a) => run::eval(&a, &argv),
        Command::Ablate(a) => run::ablate(&a, &argv),
        Command::Sweep(a) => run::sweep(&a, &argv),
        Command::Gradcheck(a) => run::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
