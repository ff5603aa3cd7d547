mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfcps::{BackboneKind, Error, ErrorKind};

#[derive(Parser)]
#[command(
    name = "dfcps",
    version,
    about = "Semi-supervised binary segmentation with dual cross pseudo supervision"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled/unlabeled split manifest for a dataset.
    Split(SplitArgs),
    /// Generate a synthetic polyp-like dataset.
    Synth(SynthArgs),
    /// Train both networks.
    Train(TrainArgs),
    /// Train once per augmentation strategy.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Summarize finished runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, env = "DFCPS_DATA_ROOT")]
    data_root: PathBuf,
    /// Labeled share, as `1/8` or `0.125`.
    #[arg(long, env = "DFCPS_FRACTION")]
    fraction: String,
    #[arg(long, env = "DFCPS_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "DFCPS_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "DFCPS_OUT")]
    out: PathBuf,
    #[arg(long, env = "DFCPS_COUNT", default_value_t = 200)]
    count: usize,
    #[arg(long, env = "DFCPS_SIZE", default_value_t = 64)]
    size: usize,
    #[arg(long, env = "DFCPS_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, env = "DFCPS_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "DFCPS_MANIFEST")]
    manifest: PathBuf,
    #[arg(long, env = "DFCPS_DATA_ROOT")]
    data_root: PathBuf,
    #[arg(long, env = "DFCPS_OUT")]
    out: PathBuf,
    /// Checkpoint whose encoder weights initialize both networks.
    #[arg(long, env = "DFCPS_INIT_BACKBONE")]
    init_backbone: Option<PathBuf>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long, env = "DFCPS_RESUME")]
    resume: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Strategy to run; repeat for several, or `all`.
    #[arg(
        long = "strategy",
        env = "DFCPS_STRATEGY",
        value_delimiter = ',',
        required = true
    )]
    strategies: Vec<String>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "DFCPS_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "DFCPS_DATA_ROOT")]
    data_root: PathBuf,
    /// Restrict evaluation to part of a split.
    #[arg(long, env = "DFCPS_MANIFEST")]
    manifest: Option<PathBuf>,
    /// `val`, `labeled`, `unlabeled` or `all`; needs a manifest unless `all`.
    #[arg(long, env = "DFCPS_SUBSET", default_value = "val")]
    subset: String,
    /// Expected backbone; a checkpoint of another architecture is rejected.
    #[arg(long, env = "DFCPS_BACKBONE")]
    backbone: Option<BackboneKind>,
    /// Resize images to this square side; defaults to the training size.
    #[arg(long, env = "DFCPS_IMAGE_SIZE")]
    image_size: Option<usize>,
    /// Timed single-image passes after one warm-up pass.
    #[arg(long, env = "DFCPS_TIMING_RUNS", default_value_t = 5)]
    timing_runs: usize,
    /// Also write the JSON report here.
    #[arg(long, env = "DFCPS_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(long, env = "DFCPS_RUNS", value_delimiter = ',', num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Write `report.txt` and `report.png` here.
    #[arg(long, env = "DFCPS_OUT")]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Split(a) => commands::split(&a.data_root, &a.fraction, a.seed, &a.out),
        Command::Synth(a) => commands::synth(&a.out, a.count, a.size, a.seed),
        Command::Train(a) => commands::train(&a.into()),
        Command::Ablate(a) => commands::ablate(&a.strategies, &a.train.into()),
        Command::Eval(a) => commands::eval(&commands::EvalRequest {
            checkpoint: a.checkpoint,
            data_root: a.data_root,
            manifest: a.manifest,
            subset: a.subset,
            backbone: a.backbone,
            image_size: a.image_size,
            timing_runs: a.timing_runs,
            out: a.out,
        }),
        Command::Report(a) => commands::report(&a.runs, a.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl From<TrainArgs> for commands::TrainRequest {
    fn from(a: TrainArgs) -> Self {
        Self {
            config: a.config,
            manifest: a.manifest,
            data_root: a.data_root,
            out: a.out,
            init_backbone: a.init_backbone,
            resume: a.resume,
        }
    }
}
