//! `run.json`: what ran, with which config, and when.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::Result;

pub const RUN_RECORD: &str = "run.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub tool_version: String,
    /// Short id over tool version and canonical config, in the style of a git blob id.
    pub content_version: Option<String>,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub status: String,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex(&Sha256::digest(cfg.canonical_json().as_bytes()))
}

pub fn content_version(cfg: &ExperimentConfig) -> String {
    let body = format!("reid {TOOL_VERSION}\n{}", cfg.canonical_json());
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body.as_bytes());
    hex(&h.finalize())[..12].to_string()
}

impl RunRecord {
    pub fn start(command: &str, cfg: Option<&ExperimentConfig>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            content_version: cfg.map(content_version),
            config_hash: cfg.map(config_hash),
            seed: cfg.map(|c| c.seed),
            started_at: Utc::now(),
            finished_at: None,
            status: "running".into(),
            exit_code: None,
            error: None,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, code: i32, error: Option<String>) {
        self.finished_at = Some(Utc::now());
        self.status = if code == 0 { "ok" } else { "failed" }.into();
        self.exit_code = Some(code);
        self.error = error;
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RUN_RECORD);
        fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}
