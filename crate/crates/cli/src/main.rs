//! `tandem`: data generation, plan inspection, training, evaluation,
//! checkpoint fusion, geometry diagnostics and the comparison grid.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("plan check found {0} violation(s)")]
    PlanViolations(usize),
    #[error(transparent)]
    Core(#[from] tandem::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(
    name = "tandem",
    version,
    about = "Joint retrieval and similarity embedding toolkit"
)]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FuseMode {
    /// Per-layer weighted merge of the IR and STS soups.
    Hierarchical,
    /// Uniform average of every listed checkpoint.
    Soup,
    /// Spherical interpolation from the IR soup to the STS soup.
    Slerp,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus as JSONL datasets plus a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory [default: <output.dir>/data].
        #[arg(short, long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print the first iterations of the training plan as JSON lines and
    /// check them; exits 1 on any violation.
    Plan {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of iterations to plan.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Write the JSON lines here instead of stdout.
        #[arg(short, long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train one model with the configured losses and sampler.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory [default: <output.dir>/train].
        #[arg(short, long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the dev or test datasets.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write eval.txt and eval.csv into this directory.
        #[arg(short, long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Merge checkpoints.
    Fuse {
        /// Starting point the deltas are measured from.
        #[arg(long, value_name = "FILE")]
        base: Option<PathBuf>,
        /// Checkpoints averaged into the IR soup.
        #[arg(long, value_name = "A,B,..", value_delimiter = ',', required = true)]
        ir_soup: Vec<PathBuf>,
        /// Checkpoints averaged into the STS soup.
        #[arg(long, value_name = "A,B,..", value_delimiter = ',', required = true)]
        sts_soup: Vec<PathBuf>,
        /// IR-only probe checkpoint supplying the IR deltas [default: the IR soup].
        #[arg(long, value_name = "FILE")]
        ir_probe: Option<PathBuf>,
        /// STS-only probe checkpoint supplying the STS deltas [default: the STS soup].
        #[arg(long, value_name = "FILE")]
        sts_probe: Option<PathBuf>,
        /// Fusion temperature.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Use raw deltas instead of deltas standardized across layers.
        #[arg(long)]
        raw_deltas: bool,
        #[arg(long, value_enum, default_value_t = FuseMode::Hierarchical)]
        mode: FuseMode,
        /// Interpolation position for slerp.
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        /// Seed recorded in the fused checkpoint's metadata.
        #[arg(long)]
        seed: Option<u64>,
        /// Fused checkpoint path; the layer weight table goes next to it.
        #[arg(short, long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Embedding-space geometry of checkpoints over the evaluation texts.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoints to diagnose, optionally as LABEL=FILE; the seeded
        /// initialization when none are given.
        #[arg(long, value_name = "[LABEL=]FILE")]
        checkpoint: Vec<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Output directory for geometry.txt and geometry.csv [default: <output.dir>].
        #[arg(short, long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train every grid variant, fuse, and write comparison tables.
    Grid {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory [default: <output.dir>/grid].
        #[arg(short, long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.load()?, out),
        Command::Plan { cfg, steps, out } => commands::plan(cfg.load()?, steps, out),
        Command::Train { cfg, out } => commands::train(cfg.load()?, out),
        Command::Eval {
            cfg,
            checkpoint,
            split,
            out,
        } => commands::eval(cfg.load()?, &checkpoint, split, out),
        Command::Fuse {
            base,
            ir_soup,
            sts_soup,
            ir_probe,
            sts_probe,
            tau,
            raw_deltas,
            mode,
            t,
            seed,
            out,
        } => commands::fuse(commands::FuseArgs {
            base,
            ir_soup,
            sts_soup,
            ir_probe,
            sts_probe,
            tau,
            raw_deltas,
            mode,
            t,
            seed,
            out,
        }),
        Command::Diagnose {
            cfg,
            checkpoint,
            split,
            out,
        } => commands::diagnose(cfg.load()?, &checkpoint, split, out),
        Command::Grid { cfg, out } => commands::grid(cfg.load()?, out),
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        config::RunConfig::resolve(self.config.as_deref(), self.seed)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
