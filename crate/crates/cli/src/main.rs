//! `attnshift` command-line driver.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 on a
//! configuration error.

mod args;
mod commands;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{config_args, resolve, Cli, COMMANDS};
use commands::{Failure, EXIT_CONFIG, EXIT_FAIL};

fn parse(argv: &[OsString]) -> Result<Cli, i32> {
    Cli::try_parse_from(argv).map_err(|e| {
        let _ = e.print();
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
            _ => EXIT_CONFIG,
        }
    })
}

/// Re-parses with the `--config` file's flags placed before the user's, so
/// explicit flags take precedence.
fn with_config(argv: Vec<OsString>) -> Result<Cli, i32> {
    let cli = parse(&argv)?;
    let Some(path) = cli.command.flags().config.clone() else {
        return Ok(cli);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        eprintln!("error: cannot read config {}: {e}", path.display());
        EXIT_CONFIG
    })?;
    let injected = config_args(&text).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let pos = argv
        .iter()
        .position(|a| a.to_str().is_some_and(|s| COMMANDS.contains(&s)))
        .map_or(1, |p| p + 1);
    let mut merged = argv[..pos].to_vec();
    merged.extend(injected.into_iter().map(OsString::from));
    merged.extend_from_slice(&argv[pos..]);
    parse(&merged)
}

fn run(argv: Vec<OsString>) -> i32 {
    let cli = match with_config(argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let name = cli.command.name();
    let resolved = match resolve(name, cli.command.flags()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = match name {
        "verify" => commands::verify(&resolved),
        "probe" => commands::probe(&resolved),
        "train" => commands::train(&resolved),
        _ => commands::bench(&resolved),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            EXIT_FAIL
        }
    }
}

fn main() -> ExitCode {
    let code = run(std::env::args_os().collect());
    ExitCode::from(code as u8)
}
