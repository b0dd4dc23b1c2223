//! `cascade-mtl`: batch driver for synthetic data generation, ensemble
//! training, evaluation and ablation grids.
//!
//! Every command reads the same TOML run configuration. `--set key=value`
//! overrides win over the file. Outputs land under
//! `$CASCADE_MTL_RUN_DIR/<run id>` (default `runs/`), where the run id is a
//! short hash of the configuration.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cascade_core::RunConfig;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cascade-mtl", version, about)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker threads for ensemble training. Defaults to the core count.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Added to every seed in the configuration.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,

    /// Root directory for run outputs.
    #[arg(
        long,
        global = true,
        env = "CASCADE_MTL_RUN_DIR",
        default_value = "runs"
    )]
    run_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `data.dir`.
    Synth,
    /// Train one ensemble per configured variant.
    Train,
    /// Score trained ensembles on the test period.
    Eval,
    /// Train and score every cell of a one-axis grid.
    Ablate {
        /// window, stride, train_years or noise. Falls back to `eval.axis`.
        #[arg(long)]
        axis: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> cascade_core::Result<()> {
    let cfg =
        RunConfig::load(cli.config.as_deref(), &cli.overrides)?.with_seed_offset(cli.seed_offset);
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let ctx = commands::Context {
        cfg,
        jobs,
        run_root: cli.run_dir,
    };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Ablate { axis } => commands::ablate(&ctx, axis.as_deref()),
    }
}
