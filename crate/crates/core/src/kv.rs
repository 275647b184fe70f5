//! `key=value` text files. Blank lines and `#` comments are skipped.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Feeds each pair to `set`, attaching the line number to any error it returns.
pub(crate) fn parse(text: &str, mut set: impl FnMut(&str, &str) -> std::result::Result<(), String>) -> Result<()> {
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
        set(k.trim(), v.trim()).map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(())
}

pub(crate) fn value<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

/// Decimal, or hexadecimal with a `0x` prefix.
pub(crate) fn int(v: &str) -> std::result::Result<u64, String> {
    match v.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).map_err(|_| format!("cannot parse `{v}`")),
        None => value(v),
    }
}
