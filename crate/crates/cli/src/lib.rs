//! `ssm` command-line driver.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

pub mod args;
mod commands;
pub mod config_file;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::Cli;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Parses `argv` (program name first), then merges the `--config` file if
/// one was given. Values on the command line override the file.
pub fn parse<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    let Some(path) = cli.command.common().config.clone() else {
        return Ok(cli);
    };
    let name = cli.command.name();
    let mut cmd = Cli::command();
    let sub = cmd
        .find_subcommand_mut(name)
        .expect("parsed subcommand exists");
    let file_args = config_file::read(&path, sub)?;
    let at = argv
        .iter()
        .position(|a| a.to_str() == Some(name))
        .expect("subcommand appears in argv");
    let mut merged = argv[..=at].to_vec();
    merged.extend(file_args.into_iter().map(OsString::from));
    merged.extend_from_slice(&argv[at + 1..]);
    Cli::try_parse_from(merged)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if let Some(jobs) = cli.command.common().jobs {
        // Fails only if a pool already exists in this process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs as usize)
            .build_global();
    }
    match commands::execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
