mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::run::ConfigSyntax;

/// Buffer-based Siamese single-object tracker: data generation, training,
/// tracking, evaluation and sweeps.
///
/// Every command except `count` writes into a fresh run directory under
/// `--runs` named `<command>-<timestamp>-<config hash>`, starting with the
/// resolved `config.toml`. Command-line flags override values from
/// `--config-file`.
#[derive(Parser, Debug)]
#[command(name = "buftrack", version)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Parent directory of per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    runs: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (`<run>/dataset/seq_NNNN`).
    GenData(GenDataArgs),
    /// Train a tracker; writes model.ckpt, train_log.csv and per-cycle checkpoints.
    Train(TrainArgs),
    /// Track one sequence; writes boxes.csv and trace.jsonl.
    Track(TrackArgs),
    /// Evaluate on a dataset; writes metrics.csv, curve.csv and success.svg.
    Eval(EvalArgs),
    /// Distractor-injection sweep; writes distractor.csv, curve.csv, success.svg and traces.
    SweepDistractor(SweepDistractorArgs),
    /// Frame-drop sweep; writes drop.csv (no-drop sentinel first) and drop_timing.csv.
    SweepDrop(SweepDropArgs),
    /// Per-stage pipeline timing; writes profile.json and prints a table.
    Profile(TrackArgs),
    /// Print the parameter count of a backbone config (and FLOPs with --flops).
    Count(CountArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Frames per sequence.
    #[arg(long)]
    length: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrackerArgs {
    /// Exemplar refresh interval.
    #[arg(long)]
    xi: Option<usize>,
    /// Drop every eta-th frame.
    #[arg(long)]
    eta: Option<usize>,
    /// Buffer capacity.
    #[arg(long)]
    beta_max: Option<usize>,
    /// Refresh exemplars from ground truth instead of predictions.
    #[arg(long)]
    gt_refresh: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    config_file: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Backbone preset name or TOML file.
    #[arg(long)]
    backbone: Option<String>,
    /// Optimizer steps per cycle.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Objectness loss multiplier.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sequence directory, or dataset directory together with --sequence.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    sequence: Option<String>,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug)]
pub struct SweepDistractorArgs {
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated percentages of buffer slots holding distractors.
    #[arg(long, value_delimiter = ',')]
    percentages: Option<Vec<u32>>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug)]
pub struct SweepDropArgs {
    #[arg(long)]
    config_file: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated drop intervals; a no-drop row is always added first.
    #[arg(long, value_delimiter = ',')]
    etas: Option<Vec<usize>>,
    #[command(flatten)]
    tracker: TrackerArgs,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Backbone preset name or TOML file.
    #[arg(long)]
    config: String,
    /// Also print per-layer FLOPs for the scene and exemplar inputs.
    #[arg(long)]
    flops: bool,
}

/// Exit status per error category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Internal = 1,
    Usage = 2,
    MissingFile = 3,
    InvalidConfig = 4,
    Parse = 5,
    Numeric = 6,
    Io = 7,
}

impl Category {
    fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::MissingFile => "missing-file",
            Category::InvalidConfig => "invalid-config",
            Category::Parse => "parse",
            Category::Numeric => "numeric",
            Category::Io => "io",
        }
    }
}

fn categorize(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<buftrack::Error>() {
            return match e {
                buftrack::Error::Config { .. }
                | buftrack::Error::InvalidArgument(_)
                | buftrack::Error::Layer { .. }
                | buftrack::Error::Shape { .. } => Category::InvalidConfig,
                buftrack::Error::Parse { .. } | buftrack::Error::Format(_) => Category::Parse,
                buftrack::Error::NonFinite { .. } => Category::Numeric,
                buftrack::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                    Category::MissingFile
                }
                buftrack::Error::Io(_) | buftrack::Error::Image(_) => Category::Io,
            };
        }
        if cause.downcast_ref::<ConfigSyntax>().is_some() {
            return Category::Parse;
        }
        if cause.is::<commands::MissingFile>() {
            return Category::MissingFile;
        }
        if cause.is::<commands::MissingOption>() {
            return Category::Usage;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound {
                Category::MissingFile
            } else {
                Category::Io
            };
        }
    }
    Category::Internal
}

fn fail(category: Category, msg: &str) -> ExitCode {
    let msg = msg.lines().next().unwrap_or("").trim();
    eprintln!("error: category={} msg={}", category.name(), msg);
    ExitCode::from(category as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let text = e.to_string();
                    let line = text
                        .lines()
                        .find(|l| l.starts_with("error:"))
                        .map(|l| l.trim_start_matches("error:").trim())
                        .unwrap_or("invalid arguments");
                    fail(Category::Usage, line)
                }
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(Category::Usage, "--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(Category::Internal, &e.to_string());
        }
    }
    match commands::dispatch(cli.command, &cli.runs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(categorize(&e), &format!("{e:#}")),
    }
}
