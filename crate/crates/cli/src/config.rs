//! Flat `key = value` config files, merged into the command line.
//!
//! Every key is a long flag name (`wl-w`, or `wl_w`). Config entries are
//! inserted right after the subcommand name, ahead of the flags typed on the
//! command line, so a flag given on the command line always wins.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use ptq_core::{PtqError, Result};

/// Parses a config file into `--key=value` arguments, in file order.
pub fn parse_config(text: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            PtqError::Format(format!("config line {}: expected key = value", i + 1))
        })?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') || key == "config" {
            return Err(PtqError::Format(format!("config line {}: bad key {key:?}", i + 1)));
        }
        args.push(format!("--{key}={}", value.trim()));
    }
    Ok(args)
}

pub fn load_config(path: &Path) -> Result<Vec<String>> {
    parse_config(&fs::read_to_string(path)?)
}

/// Inserts `extra` after the first occurrence of `subcommand` in `argv`.
pub fn splice_after_subcommand(argv: &[OsString], subcommand: &str, extra: Vec<String>) -> Vec<OsString> {
    let pos = argv
        .iter()
        .skip(1)
        .position(|a| a == subcommand)
        .map(|p| p + 2)
        .unwrap_or(argv.len());
    let mut out = argv[..pos].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[pos..]);
    out
}
