//! Result bundles: a `summary.json` with a provenance block plus CSV
//! tables under `tables/`. Re-running with an identical configuration
//! reproduces the bundle byte for byte; writing into a directory whose
//! recorded config hash differs is refused.

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

pub struct ResultBundle {
    dir: PathBuf,
    summary: serde_json::Map<String, Value>,
}

impl ResultBundle {
    /// Open a bundle directory, enforcing the hash guard.
    pub fn create(dir: &Path, config_hash: &str, config: &Value, seed: u64) -> Result<Self> {
        let summary_path = dir.join("summary.json");
        if summary_path.exists() {
            let existing: Value = serde_json::from_str(
                &fs::read_to_string(&summary_path).context("reading existing summary")?,
            )
            .context("parsing existing summary")?;
            let old = existing
                .pointer("/provenance/config_sha256")
                .and_then(|v| v.as_str())
                .unwrap_or("");
            if old != config_hash {
                bail!(
                    "refusing to overwrite {}: it was written under config hash {}, current is {}",
                    dir.display(),
                    old,
                    config_hash
                );
            }
        }
        fs::create_dir_all(dir.join("tables"))
            .with_context(|| format!("creating {}", dir.display()))?;
        let mut summary = serde_json::Map::new();
        summary.insert(
            "provenance".into(),
            json!({
                "config_sha256": config_hash,
                "version": env!("CARGO_PKG_VERSION"),
                "seed": seed,
            }),
        );
        summary.insert("config".into(), config.clone());
        Ok(Self {
            dir: dir.to_path_buf(),
            summary,
        })
    }

    pub fn insert(&mut self, key: &str, value: Value) {
        self.summary.insert(key.to_string(), value);
    }

    /// Write a CSV table. Values are formatted by the caller so the
    /// bytes are fully determined by the inputs.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut text = String::new();
        text.push_str(&header.join(","));
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let path = self.dir.join("tables").join(format!("{name}.csv"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Finalise `summary.json` (keys serialize in sorted order, so the
    /// output is canonical).
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&Value::Object(self.summary))?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Format a float for CSV output (shortest round-trip form).
pub fn fmt(v: f64) -> String {
    format!("{v}")
}
