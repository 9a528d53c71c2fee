//! Helpers shared by the line-oriented `key=value` text formats.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{PtqError, Result};
use crate::hexfloat;

/// Checks a `format <name> <version>` header line.
pub(crate) fn check_header(line: &str, name: &str, version: u16) -> Result<()> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "format" || parts[1] != name {
        return Err(PtqError::Format(format!("not a {name} file: {line:?}")));
    }
    let found: u16 = parts[2]
        .parse()
        .map_err(|_| PtqError::Format(format!("bad version {:?}", parts[2])))?;
    if found != version {
        return Err(PtqError::UnsupportedVersion {
            found,
            expected: version,
        });
    }
    Ok(())
}

/// Non-empty, non-comment lines with 1-based line numbers.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Hex-float list joined by commas.
pub(crate) fn hex_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|&v| hexfloat::format(v))
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) struct Fields<'a> {
    pub(crate) line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    pub(crate) fn parse(line: usize, tokens: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for tok in tokens {
            let (k, v) = tok.split_once('=').ok_or_else(|| {
                PtqError::Format(format!("line {line}: expected key=value, found {tok:?}"))
            })?;
            if map.insert(k, v).is_some() {
                return Err(PtqError::Format(format!("line {line}: duplicate key {k:?}")));
            }
        }
        Ok(Fields { line, map })
    }

    pub(crate) fn opt(&self, key: &str) -> Option<&'a str> {
        self.map.get(key).copied()
    }

    pub(crate) fn str(&self, key: &str) -> Result<&'a str> {
        self.opt(key)
            .ok_or_else(|| PtqError::Format(format!("line {}: missing {key:?}", self.line)))
    }

    pub(crate) fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key)?;
        raw.parse().map_err(|_| {
            PtqError::Format(format!("line {}: bad value {raw:?} for {key:?}", self.line))
        })
    }

    pub(crate) fn hex(&self, key: &str) -> Result<f64> {
        hexfloat::parse(self.str(key)?)
            .map_err(|e| PtqError::Format(format!("line {}: {key}: {e}", self.line)))
    }
}

