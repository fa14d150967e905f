//! `key = value` config files, spliced into the argument list as flags.
//!
//! Values from the file are inserted right after the subcommand, so any flag
//! given on the command line comes later and wins.

use std::ffi::OsString;
use std::path::PathBuf;

use crate::CliError;

/// Parses config text into `--key value` tokens. `flag = true` becomes a bare
/// `--flag`; `flag = false` is dropped.
pub fn config_tokens(text: &str) -> Result<Vec<OsString>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("config line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key.starts_with('-') || key.contains(char::is_whitespace) {
            return Err(CliError::Config(format!("config line {}: bad key `{key}`", n + 1)));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

/// Removes `--config FILE` from `args` and splices the file's flags in after the subcommand.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path: Option<PathBuf> = None;
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            let value = it
                .next()
                .ok_or_else(|| CliError::Config("--config needs a file path".into()))?;
            path = Some(value.into());
        } else if let Some(v) = s.strip_prefix("--config=") {
            path = Some(v.into());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let tokens = config_tokens(&text)?;
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
        .ok_or_else(|| CliError::Config("--config given without a subcommand".into()))?;
    let mut out: Vec<OsString> = rest[..=sub].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&rest[sub + 1..]);
    Ok(out)
}
