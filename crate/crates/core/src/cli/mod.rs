//! Command-line entry points, configuration and checkpoint files.

mod checkpoint;
mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use commands::{
    cmd_analyze_cka, cmd_experiment, cmd_flops, cmd_grow, cmd_train_small, load_data, small_spec,
};
pub use config::{config_from_pairs, parse_config, parse_pairs, DatasetChoice, ExperimentConfig, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mixgrow", version, about = "Grow template-mixing networks from half width")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a half-width network from scratch (or resume one).
    TrainSmall(Opts),
    /// Grow one or two trained small networks into a full-width one.
    Grow(Opts),
    /// Second small net, growth and budgeted training of the grown net.
    Experiment(Opts),
    /// CKA across checkpoints or between two models' layers.
    AnalyzeCka(Opts),
    /// Per-layer MAC counts of a preset at small and target width.
    Flops(Opts),
}

#[derive(Args, Debug)]
struct Opts {
    /// `key = value` configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (opts, cmd): (&Opts, fn(&ExperimentConfig) -> crate::Result<()>) = match &cli.command {
        Command::TrainSmall(o) => (o, cmd_train_small),
        Command::Grow(o) => (o, cmd_grow),
        Command::Experiment(o) => (o, cmd_experiment),
        Command::AnalyzeCka(o) => (o, cmd_analyze_cka),
        Command::Flops(o) => (o, cmd_flops),
    };
    let cfg = match parse_config(opts.config.as_deref(), &opts.set) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match cmd(&cfg) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
