//! `lsnet` command-line tool. Exit codes: 0 success, 2 usage, 3 data or
//! format, 4 numeric divergence or a failed gradient check.

mod args;
mod commands;
mod output;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: NUMERIC,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<lsnet::Error> for CliError {
    fn from(e: lsnet::Error) -> Self {
        use lsnet::Error as E;
        let code = match &e {
            E::Config(_) | E::Overflow(_) => USAGE,
            E::Lookup(_) | E::Format(_) | E::Incompatible(_) | E::Data(_) | E::Io(_) => DATA,
            E::Divergence { .. } | E::NonFinite(_) => NUMERIC,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn deterministic() -> bool {
    std::env::var("LSNET_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn run(cli: Cli) -> CliResult {
    let threads = if deterministic() { Some(1) } else { cli.threads };
    if threads == Some(0) {
        return Err(CliError::usage("--threads must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    pool.install(|| match cli.command {
        Command::Describe(a) => commands::describe(&a),
        Command::Train(a) => commands::train(&a, threads),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a, threads),
        Command::DumpAggWeights(a) => commands::dump_agg_weights(&a),
        Command::ErfMap(a) => commands::erf_map(&a),
        Command::GenData(a) => commands::gen_data(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lsnet: {e}");
            ExitCode::from(e.code)
        }
    }
}
