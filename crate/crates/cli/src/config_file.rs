//! Plain-text configuration files.
//!
//! ```text
//! # comment
//! epochs = 40
//! scales = 4,8,16
//! normalize-heatmaps = true
//! ```
//!
//! Keys are long flag names, with or without the leading `--`; `_` and `-`
//! are interchangeable. Values may be wrapped in double quotes. Switches
//! take `true` or `false`.

use std::fs;
use std::path::Path;

use clap::error::ErrorKind;

fn error(cmd: &mut clap::Command, path: &Path, line: usize, msg: &str) -> clap::Error {
    cmd.error(
        ErrorKind::InvalidValue,
        format!("{}:{line}: {msg}", path.display()),
    )
}

/// Translates a config file into command-line arguments for `cmd`.
pub fn read(path: &Path, cmd: &mut clap::Command) -> Result<Vec<String>, clap::Error> {
    let text = fs::read_to_string(path).map_err(|e| {
        cmd.error(
            ErrorKind::Io,
            format!("cannot read config file {}: {e}", path.display()),
        )
    })?;
    parse(&text, path, cmd)
}

pub fn parse(text: &str, path: &Path, cmd: &mut clap::Command) -> Result<Vec<String>, clap::Error> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(error(cmd, path, i + 1, "expected `key = value`"));
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        if key == "config" {
            return Err(error(
                cmd,
                path,
                i + 1,
                "config files cannot include other config files",
            ));
        }
        let takes_value = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .map(|a| a.get_action().takes_values());
        match takes_value {
            None => {
                let msg = format!("unknown key {key:?} for `{}`", cmd.get_name());
                return Err(error(cmd, path, i + 1, &msg));
            }
            Some(true) => {
                out.push(format!("--{key}"));
                out.push(value.to_string());
            }
            Some(false) => match value {
                "true" => out.push(format!("--{key}")),
                "false" => {}
                _ => return Err(error(cmd, path, i + 1, "switches take true or false")),
            },
        }
    }
    Ok(out)
}
