//! `trikv` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
//! invariant violation. Failures print one JSON line on stderr:
//! `{"error":"<kind>","exit_code":N,"message":"..."}`.
//!
//! Every JSON document written carries an `invocation` object echoing the
//! parsed arguments.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use commands::{
    CalibrateArgs, DfsArgs, DfsScoreArgs, ReconstructArgs, ScoreArgs, SimulateArgs, SynthArgs,
};

#[derive(Debug, Parser)]
#[command(
    name = "trikv",
    version,
    about = "Calibrate, score and prune KV caches from pre-RoPE Q/K statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic QKT1 trace plus a JSON provenance sidecar.
    Synth(SynthArgs),
    /// Compute per-head, per-band Q/K statistics from a trace.
    Calibrate(CalibrateArgs),
    /// Score every key of a trace at one decode position.
    Score(ScoreArgs),
    /// Measure how well center-predicted curves track actual logits.
    Reconstruct(ReconstructArgs),
    /// Replay a trace as a decode stream with window-triggered pruning.
    Simulate(SimulateArgs),
    /// Generate DFS recursive-state-query instances with ground truth.
    Dfs(DfsArgs),
    /// Score answers against a DFS batch.
    DfsScore(DfsScoreArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data { kind: String, message: String },
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m.as_str()),
            CliError::Data { kind, message } => (kind.as_str(), message.as_str()),
            CliError::Internal(m) => ("internal", m.as_str()),
        };
        serde_json::json!({ "error": kind, "exit_code": self.exit_code(), "message": message })
            .to_string()
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        CliError::Data {
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<trikv::Error> for CliError {
    fn from(e: trikv::Error) -> Self {
        CliError::data(e.kind(), e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            let message = message.join(" ");
            let err = CliError::Usage(message.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.line());
            return ExitCode::from(err.exit_code());
        }
    };
    let config = serde_json::to_value(&cli.command).expect("arguments serialize");
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, config),
        Command::Calibrate(a) => commands::calibrate(a, config),
        Command::Score(a) => commands::score(a, config),
        Command::Reconstruct(a) => commands::reconstruct(a, config),
        Command::Simulate(a) => commands::simulate(a, config),
        Command::Dfs(a) => commands::dfs(a, config),
        Command::DfsScore(a) => commands::dfs_score(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.line());
            ExitCode::from(err.exit_code())
        }
    }
}
