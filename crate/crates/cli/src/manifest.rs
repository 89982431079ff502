//! `manifest.json`: what a command read, with which settings, and how it ended.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use zodarts::data::DatasetContainer;

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    /// Git blob hash computed with SHA-256.
    pub blob_sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: String,
    pub inputs: Vec<InputRecord>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub outcome: Option<String>,
}

/// `sha256("blob <len>\0" ++ content)`, hex encoded.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: 0,
            config: String::new(),
            inputs: Vec::new(),
            started_unix: now(),
            finished_unix: None,
            outcome: None,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            blob_sha256: blob_hash(&bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// Records an in-memory dataset (generated or loaded) by its serialized bytes.
    pub fn add_dataset(&mut self, c: &DatasetContainer) {
        let bytes = c.to_bytes();
        self.inputs.push(InputRecord {
            path: format!("<{} split, {} samples>", split_name(c), c.len()),
            blob_sha256: blob_hash(&bytes),
            bytes: bytes.len(),
        });
    }

    pub fn finish(self, dir: &Path, outcome: &str) -> Result<()> {
        self.finish_named(dir, "manifest.json", outcome)
    }

    pub fn finish_named(mut self, dir: &Path, name: &str, outcome: &str) -> Result<()> {
        self.finished_unix = Some(now());
        self.outcome = Some(outcome.into());
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn split_name(c: &DatasetContainer) -> String {
    c.split.map_or_else(|| "unnamed".into(), |s| format!("{s:?}").to_lowercase())
}
