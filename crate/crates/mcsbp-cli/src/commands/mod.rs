pub mod cumulant;
pub mod examples;
pub mod extinction;
pub mod simulate;
pub mod spectral;
pub mod spine;
pub mod suite;

use anyhow::{Context, Result};
use std::io::Write;
use std::path::Path;

/// Write a small CSV table to `--out` or stdout.
pub fn emit_table(
    out: Option<&Path>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Write a JSON report to `--out` or stdout.
pub fn emit_json(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
