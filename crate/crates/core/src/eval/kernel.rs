//! Bridge to the external `rank-kernel` executable.
//!
//! Embeddings go over as `REIDEMB1` files; the kernel answers with
//! `{"rank":{"1":f,...},"map":f}` and signals failures by exit code
//! (2 bad magic, 3 dimension mismatch, 4 no valid queries).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Deserialize;

use super::format::write_embeddings;
use super::{EmbeddingSet, EvalReport};
use crate::error::{ReidError, Result};

/// Environment variable naming the kernel executable.
pub const KERNEL_ENV: &str = "REID_RANK_KERNEL";
pub const KERNEL_PROGRAM: &str = "rank-kernel";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NativeKernel {
    program: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelOutput {
    rank: BTreeMap<String, f64>,
    map: f64,
}

/// Parse the kernel's JSON report. Ranks 1 and 20 must be present.
pub fn parse_kernel_report(json: &str) -> Result<EvalReport> {
    let out: KernelOutput = serde_json::from_str(json)?;
    let mut cmc = BTreeMap::new();
    for (k, v) in out.rank {
        let k: usize = k
            .parse()
            .map_err(|_| ReidError::Format(format!("rank key '{k}' is not a positive integer")))?;
        if k == 0 || !(0.0..=1.0).contains(&v) {
            return Err(ReidError::Format(format!("rank@{k} = {v} out of range")));
        }
        cmc.insert(k, v);
    }
    if !(0.0..=1.0).contains(&out.map) {
        return Err(ReidError::Format(format!("map = {} out of range", out.map)));
    }
    let need = |k: usize| {
        cmc.get(&k)
            .copied()
            .ok_or_else(|| ReidError::Format(format!("kernel report lacks rank {k}")))
    };
    Ok(EvalReport {
        rank1: need(1)?,
        rank20: need(20)?,
        map: out.map,
        cmc,
        per_query_ap: Vec::new(),
        valid_queries: None,
    })
}

fn error_for_status(code: Option<i32>, stderr: &str) -> ReidError {
    let detail = stderr.trim().to_string();
    match code {
        Some(2) => ReidError::BadMagic {
            expected: "REIDEMB1",
            reason: format!("rank kernel: {detail}"),
        },
        Some(3) => ReidError::DimMismatch(format!("rank kernel: {detail}")),
        Some(4) => ReidError::NoValidQueries,
        Some(c) => ReidError::Kernel(format!("exit code {c}: {detail}")),
        None => ReidError::Kernel(format!("terminated by signal: {detail}")),
    }
}

impl NativeKernel {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
        }
    }

    /// `$REID_RANK_KERNEL`, falling back to `rank-kernel` on `PATH`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(KERNEL_ENV).map_or_else(|| PathBuf::from(KERNEL_PROGRAM), PathBuf::from))
    }

    pub fn program(&self) -> &Path {
        &self.program
    }

    /// Run the kernel on pre-written embedding files.
    pub fn run_files(&self, query: &Path, gallery: &Path, topk: &[usize], out: &Path) -> Result<EvalReport> {
        let mut ks: Vec<usize> = topk.to_vec();
        ks.extend([1, 20]);
        ks.sort_unstable();
        ks.dedup();
        let topk_arg = ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let output = Command::new(&self.program)
            .arg("--query")
            .arg(query)
            .arg("--gallery")
            .arg(gallery)
            .arg("--topk")
            .arg(&topk_arg)
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| ReidError::Kernel(format!("cannot run {}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(error_for_status(
                output.status.code(),
                &String::from_utf8_lossy(&output.stderr),
            ));
        }
        let mut report = parse_kernel_report(&std::fs::read_to_string(out)?)?;
        report.cmc.retain(|k, _| topk.contains(k));
        Ok(report)
    }

    pub fn evaluate(&self, query: &EmbeddingSet, gallery: &EmbeddingSet, topk: &[usize]) -> Result<EvalReport> {
        let dir = tempfile::tempdir()?;
        let q = dir.path().join("query.emb");
        let g = dir.path().join("gallery.emb");
        write_embeddings(&q, query)?;
        write_embeddings(&g, gallery)?;
        self.run_files(&q, &g, topk, &dir.path().join("report.json"))
    }
}
