//! `REIDEMB1` binary embedding files.
//!
//! Layout, all little-endian: 8-byte magic, `u32 N`, `u32 D`, `N·D f32`
//! vectors (row-major), `N i32` person ids, `N i32` camera ids.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::EmbeddingSet;
use crate::error::{ReidError, Result};

pub const EMB_MAGIC: &[u8; 8] = b"REIDEMB1";
const HEADER_LEN: usize = 16;

pub fn encode(set: &EmbeddingSet) -> Vec<u8> {
    let (n, d) = set.vectors.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (d + 2));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in set.vectors.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for id in &set.person_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for cam in &set.camera_ids {
        out.extend_from_slice(&cam.to_le_bytes());
    }
    out
}

fn words(bytes: &[u8]) -> impl Iterator<Item = [u8; 4]> + '_ {
    bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]])
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingSet> {
    let bad = |reason: String| ReidError::BadMagic {
        expected: "REIDEMB1",
        reason,
    };
    if bytes.len() < EMB_MAGIC.len() || &bytes[..8] != EMB_MAGIC {
        return Err(bad("magic bytes missing".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(2 * n))
        .and_then(|words| words.checked_mul(4))
        .and_then(|body| body.checked_add(HEADER_LEN))
        .ok_or_else(|| ReidError::Format(format!("N={n}, D={d} overflows")))?;
    // Short files count as truncated (same code as bad magic); long ones as malformed.
    if bytes.len() < expected {
        return Err(bad(format!(
            "N={n}, D={d} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(ReidError::Format(format!(
            "N={n}, D={d} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    let (vecs, rest) = body.split_at(4 * n * d);
    let (pids, cams) = rest.split_at(4 * n);
    let vectors: Vec<f64> = words(vecs).map(|w| f32::from_le_bytes(w) as f64).collect();
    let vectors = Array2::from_shape_vec((n, d), vectors).expect("length checked above");
    EmbeddingSet::new(
        vectors,
        words(pids).map(i32::from_le_bytes).collect(),
        words(cams).map(i32::from_le_bytes).collect(),
    )
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    fs::write(path, encode(set))?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    decode(&fs::read(path)?)
}
