//! Retrieval evaluation: descriptors, distances and the Market protocol
//! (CMC / Rank-k and mAP).
//!
//! Ranking ties are broken by gallery index, so shuffling the gallery can
//! only change a report when two distances are exactly equal.

mod extract;
pub mod format;
pub mod kernel;

pub use extract::{descriptors, extract, DescriptorSource, EnsembleMode};
pub use kernel::NativeKernel;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

pub const DEFAULT_TOPK: [usize; 4] = [1, 5, 10, 20];

/// Descriptors with the identity and camera of each image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Array2<f64>,
    pub person_ids: Vec<i32>,
    pub camera_ids: Vec<i32>,
}

impl EmbeddingSet {
    pub fn new(vectors: Array2<f64>, person_ids: Vec<i32>, camera_ids: Vec<i32>) -> Result<Self> {
        let n = vectors.nrows();
        if person_ids.len() != n || camera_ids.len() != n {
            return Err(ReidError::DimMismatch(format!(
                "{n} vectors but {} person ids and {} camera ids",
                person_ids.len(),
                camera_ids.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(ReidError::NonFiniteInput("embedding set"));
        }
        Ok(Self {
            vectors,
            person_ids,
            camera_ids,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            vectors: Array2::zeros((0, dim)),
            person_ids: Vec::new(),
            camera_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank20: f64,
    pub map: f64,
    /// CMC at each requested k.
    pub cmc: BTreeMap<usize, f64>,
    /// Average precision per query; `None` for queries without a valid match.
    /// Empty when the report came from the native kernel.
    pub per_query_ap: Vec<Option<f64>>,
    pub valid_queries: Option<usize>,
}

/// Which implementation ranks the gallery.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    #[default]
    Reference,
    Native,
}

impl FromStr for KernelChoice {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(KernelChoice::Reference),
            "native" => Ok(KernelChoice::Native),
            other => Err(ReidError::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

impl fmt::Display for KernelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelChoice::Reference => "reference",
            KernelChoice::Native => "native",
        })
    }
}

/// Squared Euclidean distances, `[Nq, Ng]`.
pub fn distance_matrix(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Array2<f64>> {
    if query.dim() != gallery.dim() {
        return Err(ReidError::DimMismatch(format!(
            "query D={} but gallery D={}",
            query.dim(),
            gallery.dim()
        )));
    }
    let (nq, ng) = (query.len(), gallery.len());
    let rows: Vec<f64> = (0..nq)
        .into_par_iter()
        .flat_map_iter(|i| {
            let q = query.vectors.row(i);
            (0..ng).map(move |j| {
                q.iter()
                    .zip(gallery.vectors.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
        })
        .collect();
    Ok(Array2::from_shape_vec((nq, ng), rows).expect("nq * ng entries"))
}

struct QueryResult {
    /// 0-based position of the first correct match among kept entries.
    first_hit: usize,
    ap: f64,
}

fn is_junk(person_id: i32) -> bool {
    person_id == -1 || person_id == 0
}

fn rank_query(
    dist: ndarray::ArrayView1<'_, f64>,
    q_id: i32,
    q_cam: i32,
    g_ids: &[i32],
    g_cams: &[i32],
) -> Option<QueryResult> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut first_hit = None;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut position = 0usize;
    for j in order {
        if is_junk(g_ids[j]) || (g_ids[j] == q_id && g_cams[j] == q_cam) {
            continue;
        }
        position += 1;
        if g_ids[j] == q_id {
            hits += 1;
            precision_sum += hits as f64 / position as f64;
            first_hit.get_or_insert(position - 1);
        }
    }
    first_hit.map(|first_hit| QueryResult {
        first_hit,
        ap: precision_sum / hits as f64,
    })
}

/// Market-protocol CMC and mAP from a distance matrix.
///
/// Gallery entries sharing both identity and camera with the query are
/// dropped, as are ids −1 (distractors) and 0 (junk). Queries left without a
/// correct match are excluded from every metric.
pub fn cmc_map(
    dist: ArrayView2<'_, f64>,
    q_ids: &[i32],
    q_cams: &[i32],
    g_ids: &[i32],
    g_cams: &[i32],
    topk: &[usize],
) -> Result<EvalReport> {
    let (nq, ng) = dist.dim();
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(ReidError::DimMismatch(format!(
            "distance matrix is {nq}x{ng} but ids/cams have lengths {}/{} and {}/{}",
            q_ids.len(),
            q_cams.len(),
            g_ids.len(),
            g_cams.len()
        )));
    }
    if topk.contains(&0) {
        return Err(ReidError::Config("top-k values start at 1".into()));
    }
    if dist.iter().any(|v| v.is_nan()) {
        return Err(ReidError::NonFiniteInput("distance matrix"));
    }
    let results: Vec<Option<QueryResult>> = (0..nq)
        .into_par_iter()
        .map(|i| rank_query(dist.row(i), q_ids[i], q_cams[i], g_ids, g_cams))
        .collect();
    let valid: Vec<&QueryResult> = results.iter().flatten().collect();
    if valid.is_empty() {
        return Err(ReidError::NoValidQueries);
    }
    let n = valid.len() as f64;
    let cmc_at = |k: usize| valid.iter().filter(|r| r.first_hit < k).count() as f64 / n;
    let map = valid.iter().map(|r| r.ap).sum::<f64>() / n;
    Ok(EvalReport {
        rank1: cmc_at(1),
        rank20: cmc_at(20),
        map,
        cmc: topk.iter().map(|&k| (k, cmc_at(k))).collect(),
        per_query_ap: results.iter().map(|r| r.as_ref().map(|r| r.ap)).collect(),
        valid_queries: Some(valid.len()),
    })
}

/// Rank `gallery` for every query with the chosen implementation.
pub fn evaluate_sets(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    topk: &[usize],
    kernel: Option<&NativeKernel>,
) -> Result<EvalReport> {
    match kernel {
        None => {
            let dist = distance_matrix(query, gallery)?;
            cmc_map(
                dist.view(),
                &query.person_ids,
                &query.camera_ids,
                &gallery.person_ids,
                &gallery.camera_ids,
                topk,
            )
        }
        Some(native) => native.evaluate(query, gallery, topk),
    }
}
