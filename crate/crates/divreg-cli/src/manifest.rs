//! The run manifest: one JSON file per command invocation recording what
//! ran, with what effective config, and what it produced. A manifest plus
//! the input files is enough to repeat the run exactly; only its two
//! timestamp fields vary between repetitions.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub precision: String,
    /// The effective config after flag overrides.
    pub config: serde_json::Value,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<String>,
    /// Command-specific headline numbers.
    pub summary: serde_json::Value,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(
        command: &str,
        seed: u64,
        precision: &str,
        config: serde_json::Value,
    ) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            precision: precision.to_string(),
            config,
            started_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    /// Stamp the finish time and write the manifest into `out_dir`.
    pub fn finish(
        mut self,
        out_dir: &Path,
        outputs: Vec<String>,
        summary: serde_json::Value,
    ) -> Result<()> {
        self.finished_unix = now_unix();
        self.outputs = outputs;
        self.summary = summary;
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let path = out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self).context("encoding manifest")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
