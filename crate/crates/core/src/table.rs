//! Minimal comma-separated text helpers shared by the file parsers.

use crate::error::{Error, Result};

/// Non-blank, non-comment lines split on commas, with 1-based line numbers.
pub(crate) fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            None
        } else {
            Some((i + 1, line.split(',').map(str::trim).collect()))
        }
    })
}

pub(crate) fn parse_f64(line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("'{field}' is not finite")));
    }
    Ok(v)
}

pub(crate) fn numeric_row(line: usize, fields: &[&str], expected: usize) -> Result<Vec<f64>> {
    if fields.len() != expected {
        return Err(Error::parse(
            line,
            format!("expected {expected} fields, found {}", fields.len()),
        ));
    }
    fields.iter().map(|f| parse_f64(line, f)).collect()
}
