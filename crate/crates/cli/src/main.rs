use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "dmc", version, about = "Dataset condensation by distribution matching")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dataset root (one directory per dataset); defaults to $DMC_DATA_DIR.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    pub dataset: Option<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Parallel workers; 1 is the bit-reproducible reference.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Where to write the run report (JSON).
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

/// Overrides for the evaluation recipe.
#[derive(Args, Clone, Debug, Default)]
pub struct EvalFlags {
    /// Architecture used to evaluate (e.g. convnet3, convnet3-bn, alexnet).
    #[arg(long)]
    pub arch: Option<String>,

    #[arg(long)]
    pub eval_width: Option<usize>,

    /// Number of condensed sets to evaluate.
    #[arg(long)]
    pub repeats: Option<usize>,

    /// Networks trained per set.
    #[arg(long)]
    pub nets: Option<usize>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub eval_lr: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Training augmentation: `default`, `none` or a comma list.
    #[arg(long)]
    pub eval_aug: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a synthetic set.
    Condense(commands::CondenseArgs),
    /// Train fresh networks on condensed sets (or the whole training set) and test them.
    Eval(commands::EvalArgs),
    /// Build a random or herding coreset.
    Baseline(commands::BaselineArgs),
    /// Class-incremental learning with a rebuilt memory.
    Cl(commands::ClArgs),
    /// Rank architectures on proxy sets and correlate with a reference ranking.
    Nas(commands::NasArgs),
    /// Check the last-layer gradient / mean-feature identities numerically.
    VerifyAppendix,
    /// Render a condensed set as a PNG grid.
    ExportGrid(commands::ExportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Condense(a) => commands::condense(&cli.common, a),
        Command::Eval(a) => commands::eval(&cli.common, a),
        Command::Baseline(a) => commands::baseline(&cli.common, a),
        Command::Cl(a) => commands::cl(&cli.common, a),
        Command::Nas(a) => commands::nas(&cli.common, a),
        Command::VerifyAppendix => commands::verify_appendix(&cli.common),
        Command::ExportGrid(a) => commands::export_grid(&cli.common, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
