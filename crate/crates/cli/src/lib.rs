//! Command-line front end for `qnet-core`: the `QNET1` model container, the
//! `QCAL1` sample file, and the `qnet` subcommands.

pub mod calib;
pub mod commands;
pub mod container;
pub mod error;
pub mod fixtures;
pub mod io;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult, FormatError};

#[derive(Debug, Parser)]
#[command(
    name = "qnet",
    version,
    about = "Low-bit post-training quantization of small conv nets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize the weights of a full-precision container.
    Quantize(commands::QuantizeArgs),
    /// Fit activation scales on a calibration set.
    Calibrate(commands::CalibrateArgs),
    /// Fit the per-kernel rescale factors γ.
    Refine(commands::RefineArgs),
    /// Compare a quantized model with its full-precision reference.
    Eval(commands::EvalArgs),
    /// Emit CSV reports computed from a quantized container.
    Report(commands::ReportArgs),
}

/// Runs one subcommand and returns the text to print.
pub fn run(cli: &Cli) -> CliResult<String> {
    Ok(match &cli.command {
        Command::Quantize(a) => commands::cmd_quantize(a)?.to_string(),
        Command::Calibrate(a) => commands::cmd_calibrate(a)?.to_string(),
        Command::Refine(a) => commands::cmd_refine(a)?.to_string(),
        Command::Eval(a) => commands::cmd_eval(a)?.to_string(),
        Command::Report(a) => commands::cmd_report(a)?.to_string(),
    })
}
