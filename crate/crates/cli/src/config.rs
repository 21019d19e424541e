use std::fs;
use std::path::Path;

use crate::error::Failure;

/// `key=value` lines; blank lines and `#` comments are skipped. Later
/// entries override earlier ones when applied in order.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    parse_pairs(&text).map_err(|(line, msg)| Failure::usage(format!("{}:{line}: {msg}", path.display())))
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| (i + 1, format!("expected key=value, got '{line}'")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err((i + 1, "empty key".into()));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse a `--set KEY=VALUE` argument.
pub fn parse_override(arg: &str) -> Result<(String, String), String> {
    match parse_pairs(arg) {
        Ok(mut v) if v.len() == 1 => Ok(v.remove(0)),
        _ => Err(format!("expected KEY=VALUE, got '{arg}'")),
    }
}
