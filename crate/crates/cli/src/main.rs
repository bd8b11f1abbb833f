//! `canseg`: train, run and inspect the context aggregation network.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error; `selftest`
//! exits with the number of failed properties (at most 125).

mod bench;
mod checks;
mod infer;
mod profile;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use canseg_core::run_config::RunConfig;
use clap::{Parser, Subcommand};

const THREADS_VAR: &str = "CANSEG_THREADS";

#[derive(Parser)]
#[command(
    name = "canseg",
    version,
    about = "Context aggregation network for real-time semantic segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic shapes dataset; resumes from io.checkpoint when it exists.
    Train(train::TrainArgs),
    /// Segment PPM images, writing a label PGM and a color PPM per image.
    Infer(infer::InferArgs),
    /// Print per-layer parameters, FLOPs, MAdds and memory plus the attention cost.
    Profile(profile::ProfileArgs),
    /// Time inference-mode forward passes (machine dependent).
    Bench(bench::BenchArgs),
    /// Finite-difference gradient check of every block and the full network.
    Gradcheck(checks::GradcheckArgs),
    /// Run the oracle-equivalence battery.
    Selftest(checks::SelftestArgs),
    /// Write a synthetic validation image and its labels.
    Synth(infer::SynthArgs),
}

/// Config from `path`, or `RunConfig::default()` when absent.
pub(crate) fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub(crate) fn config_error(msg: impl Into<String>) -> anyhow::Error {
    canseg_core::Error::Config(msg.into()).into()
}

/// Worker cap from `CANSEG_THREADS`, defaulting to the available cores.
pub(crate) fn thread_limit() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(config_error(format!(
                "{THREADS_VAR} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))
}

pub(crate) fn read_file(path: &PathBuf) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<canseg_core::Error>() {
        Some(canseg_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Profile(a) => profile::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Gradcheck(a) => checks::gradcheck(a),
        Command::Selftest(a) => checks::selftest(a),
        Command::Synth(a) => infer::synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
