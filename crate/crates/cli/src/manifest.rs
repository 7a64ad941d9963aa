//! Run manifests: the full resolved config, seeds, tool version, timing,
//! and output paths, written atomically next to the outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: String, config: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        RunManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            started_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Finalizes timing and writes atomically (temp + rename).
    pub fn finish(mut self, path: &Path) -> std::io::Result<()> {
        self.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        let tmp = path.with_extension("manifest.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}
