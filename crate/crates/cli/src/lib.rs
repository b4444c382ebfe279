//! Configuration-driven driver: certified rates, simulations, parameter
//! sweeps and the verification oracles.

pub mod commands;
pub mod config;
pub mod oracles;
pub mod output;

use thiserror::Error;

pub use config::{Command, Format, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("source error: {0}")]
    Source(#[from] bb84_core::source::SourceError),
    #[error("bounds error: {0}")]
    Bounds(#[from] bb84_core::bounds::BoundsError),
    #[error("protocol error: {0}")]
    Protocol(#[from] bb84_core::protocol::ProtocolError),
    #[error("extraction error: {0}")]
    Extract(#[from] bb84_core::extract::ExtractError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} oracles failed")]
    OracleFailure { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::OracleFailure { .. } => 3,
            CliError::Io(_) => 1,
            _ => 2,
        }
    }
}

/// Runs `command` and returns the rendered output. Oracle failures still
/// produce the full table alongside the error.
pub fn run(command: Command, cfg: &RunConfig, format: Format) -> (String, Result<(), CliError>) {
    let rows = match command {
        Command::Rate => commands::rate(cfg),
        Command::Simulate => commands::simulate(cfg),
        Command::Sweep => commands::sweep(cfg),
        Command::Verify => {
            let results = oracles::run_all(cfg);
            let failed = results.iter().filter(|r| !r.passed).count();
            let total = results.len();
            let table = output::Table::from_serialize(oracles::COLUMNS, &results);
            let status = if failed > 0 { Err(CliError::OracleFailure { failed, total }) } else { Ok(()) };
            return match table.render(format) {
                Ok(text) => (text, status),
                Err(e) => (String::new(), Err(e)),
            };
        }
    };
    match rows.and_then(|t| t.render(format)) {
        Ok(text) => (text, Ok(())),
        Err(e) => (String::new(), Err(e)),
    }
}

pub fn default_format(command: Command) -> Format {
    match command {
        Command::Simulate | Command::Verify => Format::Jsonl,
        Command::Rate | Command::Sweep => Format::Csv,
    }
}
