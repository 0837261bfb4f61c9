//! `grainsim`: generate Potts grain-growth data, train the compressed
//! graph surrogate, roll it out and compare grain statistics.

#[cfg(feature = "alloc-stats")]
mod alloc;
mod commands;
mod config;
mod error;
mod plot;

#[cfg(feature = "alloc-stats")]
#[global_allocator]
static GLOBAL: alloc::Counting = alloc::Counting;

use std::process::ExitCode;

use clap::{ArgMatches, Command};

use crate::config::RunConfig;
use crate::error::CliError;

type Handler = fn(&RunConfig) -> Result<(), CliError>;

const COMMANDS: &[(&str, &str, Handler)] = &[
    ("generate", "run Monte Carlo trajectories and postprocess them into a dataset", commands::generate::run),
    ("postprocess", "rebuild the field containers of a dataset from its raw lattices", postprocess),
    ("train", "train the surrogate on a dataset", commands::train::run),
    ("infer", "roll a checkpoint forward from an initial frame", commands::infer::run),
    ("stats", "grain statistics of ground-truth and predicted trajectories", commands::stats::run),
    ("bench", "graph sizes, memory proxy and step time across meshes and ratios", commands::bench::run),
    ("verify", "run the invariant self-checks", commands::verify::run),
];

fn postprocess(cfg: &RunConfig) -> Result<(), CliError> {
    commands::generate::repostprocess(cfg)
}

fn cli() -> Command {
    let mut cmd = Command::new("grainsim")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Grain-growth surrogate workbench")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about, _) in COMMANDS {
        cmd = cmd.subcommand(config::with_config_flags(Command::new(name).about(about)));
    }
    cmd
}

fn dispatch(name: &str, matches: &ArgMatches) -> Result<(), CliError> {
    let cfg = config::load(matches)?;
    let (_, _, handler) = COMMANDS.iter().find(|c| c.0 == name).expect("registered subcommand");
    handler(&cfg)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("grainsim {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
