mod args;
mod commands;
mod inputs;
mod plot;
mod report;

use std::fmt;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use args::{Cli, Command};

/// A failure that ends the run without a report.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<convexity_lab::Error> for CliError {
    fn from(e: convexity_lab::Error) -> Self {
        let code = match e {
            convexity_lab::Error::Divergence { .. } | convexity_lab::Error::NonMonotone { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn jobs(requested: Option<usize>) -> usize {
    requested
        .filter(|&j| j > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run() -> Result<u8, CliError> {
    let argv = args::merge_config(std::env::args_os().collect()).map_err(CliError::usage)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    let started = Instant::now();
    let finished = match &cli.command {
        Command::Certify(a) => commands::certify(a)?,
        Command::Flow(a) => commands::flow(a)?,
        Command::Sgd(a) => commands::sgd(a, jobs(cli.jobs))?,
        Command::LinearAudit(a) => commands::linear_audit(a)?,
        Command::Plot(a) => commands::plot(a)?,
    };
    report::emit(finished.report, started.elapsed(), cli.report.as_deref())?;
    Ok(finished.status.exit_code())
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
