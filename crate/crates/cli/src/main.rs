//! `timeloops` command-line front end.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "timeloops", version, about = "Learn syscall allow-lists from live traffic (simulated)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one session and write latency, session and policy outputs.
    Simulate(SimulateArgs),
    /// Compare two policies.
    Diff(DiffArgs),
    /// Print the seccomp profile for a policy.
    ExportSeccomp(ExportArgs),
    /// Check the published comparison table against its stated figures.
    VerifyPaper(VerifyArgs),
    /// Run the four exploit categories and print verdicts.
    AttackScenarios(AttackArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Timeloops,
    Unhardened,
    Hardened,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleModeArg {
    Single,
    Watchdog,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DenyPreset {
    None,
    Podman,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Service name; defaults to the first in the scenario.
    #[arg(long)]
    pub service: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Request mix as key=weight[,key=weight...]; defaults to all benign handlers, equally weighted.
    #[arg(long)]
    pub mix: Option<String>,
    #[arg(long, value_enum, default_value_t = Mode::Timeloops)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = OracleModeArg::Single)]
    pub oracle_mode: OracleModeArg,
    #[arg(long, default_value_t = 10_000.0)]
    pub watchdog_ms: f64,
    #[arg(long, value_enum, default_value_t = DenyPreset::None)]
    pub deny_preset: DenyPreset,
    /// Comma-separated request keys learned before deployment.
    #[arg(long, value_delimiter = ',')]
    pub pretrain: Vec<String>,
    #[arg(long, default_value = "./out")]
    pub out: PathBuf,
    /// Comparison table CSV used by the podman deny preset.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiffArgs {
    /// Policy JSON, session JSON, policy log, or @column from the comparison table.
    pub a: String,
    pub b: String,
    /// Comparison table used for @column inputs and CVE annotations.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    pub policy: String,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Return EPERM instead of killing the process on a blocked syscall.
    #[arg(long)]
    pub errno: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub service: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DenyPreset::None)]
    pub deny_preset: DenyPreset,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Diff(a) => commands::diff(&a),
        Command::ExportSeccomp(a) => commands::export_seccomp(&a),
        Command::VerifyPaper(a) => commands::verify_paper(&a),
        Command::AttackScenarios(a) => commands::attack_scenarios(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::ClaimsFailed) {
                eprintln!("error: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
