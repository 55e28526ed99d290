//! Covariance contrastive term, classification cross-entropy, and their sum.
//!
//! The covariance term works on per-sample scalars: each feature map is
//! reduced to an embedding `e` (spatial mean per channel, shape `[C, 1]`),
//! whose covariance matrix `e·eᵀ` is summed to a single value. Along the
//! pair mask, with `P_i`/`N_i` the scalars of the i-th positive/negative:
//!
//! ```text
//! S    = Σ_{i=1}^{n-1} ((P_{i+1} − P_i) − (N_{i+1} − N_i))
//! loss = λ · (α · S − β)
//! ```

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3, Array4, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::PairMask;
use crate::error::{ReidError, Result};

/// A feature map the covariance term can be computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureTap {
    Backbone,
    Block2 { head: usize },
}

impl fmt::Display for FeatureTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureTap::Backbone => f.write_str("backbone"),
            FeatureTap::Block2 { head } => write!(f, "heads.{head}.block2"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovTapMode {
    Block2ActiveHead,
    /// Block-2 output of every head up to and including the active one.
    Block2BothHeads,
    Backbone,
}

impl CovTapMode {
    pub fn taps(self, active_head: usize) -> Vec<FeatureTap> {
        match self {
            CovTapMode::Block2ActiveHead => vec![FeatureTap::Block2 { head: active_head }],
            CovTapMode::Block2BothHeads => (0..=active_head).map(|head| FeatureTap::Block2 { head }).collect(),
            CovTapMode::Backbone => vec![FeatureTap::Backbone],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovLossConfig {
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "defaults::tap")]
    pub tap: CovTapMode,
}

mod defaults {
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn alpha() -> f64 {
        1e-9
    }
    pub fn tap() -> super::CovTapMode {
        super::CovTapMode::Block2BothHeads
    }
}

impl Default for CovLossConfig {
    fn default() -> Self {
        Self {
            lambda: defaults::lambda(),
            alpha: defaults::alpha(),
            beta: 0.0,
            tap: defaults::tap(),
        }
    }
}

impl CovLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ReidError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ReidError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !self.beta.is_finite() {
            return Err(ReidError::Config("beta must be finite".into()));
        }
        Ok(())
    }
}

/// Per-sample embeddings, `[B, C, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(pub Array3<f64>);

impl EmbeddingMatrix {
    pub fn batch_size(&self) -> usize {
        self.0.dim().0
    }

    pub fn row(&self, b: usize) -> ArrayView1<'_, f64> {
        self.0.index_axis(Axis(0), b).index_axis_move(Axis(1), 0)
    }
}

/// Spatial mean of each channel followed by a trailing unit axis.
pub fn embed(features: &Array4<f64>) -> Result<EmbeddingMatrix> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(ReidError::NonFiniteInput("embed"));
    }
    let (b, c, h, w) = features.dim();
    let mean = features.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w).max(1) as f64;
    Ok(EmbeddingMatrix(
        mean.into_shape_with_order((b, c, 1)).expect("contiguous mean"),
    ))
}

/// Sum of all elements of `e·eᵀ`, which equals `(Σ e)²`.
pub fn cov_scalar(e: ArrayView1<'_, f64>) -> f64 {
    let s = e.sum();
    s * s
}

/// The consecutive-difference sum `S` over scalar sequences.
pub fn consecutive_difference_sum(positives: &[f64], negatives: &[f64]) -> f64 {
    debug_assert_eq!(positives.len(), negatives.len());
    positives
        .windows(2)
        .zip(negatives.windows(2))
        .map(|(p, n)| (p[1] - p[0]) - (n[1] - n[0]))
        .sum()
}

/// Feature maps keyed by tap.
pub type TapFeatures = BTreeMap<FeatureTap, Array4<f64>>;

#[derive(Debug, Clone)]
pub struct CovLoss {
    pub value: f64,
    pub per_tap: BTreeMap<FeatureTap, f64>,
    /// d loss / d features for every tap that contributed.
    pub grads: BTreeMap<FeatureTap, Array4<f64>>,
}

/// Covariance loss summed over the taps selected by `cfg.tap`.
pub fn covariance_loss(
    features: &TapFeatures,
    mask: &PairMask,
    cfg: &CovLossConfig,
    active_head: usize,
) -> Result<CovLoss> {
    if mask.pairs.len() < 2 {
        return Err(ReidError::MaskTooSmall(mask.pairs.len()));
    }
    let mut out = CovLoss {
        value: 0.0,
        per_tap: BTreeMap::new(),
        grads: BTreeMap::new(),
    };
    for tap in cfg.tap.taps(active_head) {
        let fmap = features
            .get(&tap)
            .ok_or_else(|| ReidError::TapUnavailable(tap.to_string()))?;
        let (value, grad) = covariance_term(fmap, mask, cfg)?;
        out.value += value;
        out.per_tap.insert(tap, value);
        out.grads.insert(tap, grad);
    }
    Ok(out)
}

/// Covariance loss and its gradient for a single feature map.
pub fn covariance_term(features: &Array4<f64>, mask: &PairMask, cfg: &CovLossConfig) -> Result<(f64, Array4<f64>)> {
    let (b, _, h, w) = features.dim();
    let n = mask.pairs.len();
    if n < 2 {
        return Err(ReidError::MaskTooSmall(n));
    }
    if mask.batch_size != b {
        return Err(ReidError::InvalidBatchShape(format!(
            "mask built for {} samples, features have {b}",
            mask.batch_size
        )));
    }
    if let Some(&(p, q)) = mask.pairs.iter().find(|&&(p, q)| p >= b || q >= b) {
        return Err(ReidError::InvalidBatchShape(format!(
            "pair ({p}, {q}) out of range for batch of {b}"
        )));
    }
    let emb = embed(features)?;
    let sums: Vec<f64> = (0..b).map(|i| emb.row(i).sum()).collect();
    let positives: Vec<f64> = mask.pairs.iter().map(|&(p, _)| sums[p] * sums[p]).collect();
    let negatives: Vec<f64> = mask.pairs.iter().map(|&(_, q)| sums[q] * sums[q]).collect();
    let s = consecutive_difference_sum(&positives, &negatives);
    let value = cfg.lambda * (cfg.alpha * s - cfg.beta);

    // dS/dP_i: +1 as the minuend of term i-1, −1 as the subtrahend of term i.
    let mut coef = vec![0.0; b];
    for (i, &(p, q)) in mask.pairs.iter().enumerate() {
        let c = f64::from(u8::from(i >= 1)) - f64::from(u8::from(i + 1 < n));
        coef[p] += c;
        coef[q] -= c;
    }
    let scale = cfg.lambda * cfg.alpha / (h * w).max(1) as f64;
    let mut grad = Array4::zeros(features.raw_dim());
    for (bi, mut sample) in grad.axis_iter_mut(Axis(0)).enumerate() {
        if coef[bi] != 0.0 {
            sample.fill(scale * coef[bi] * 2.0 * sums[bi]);
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub value: f64,
    /// d loss / d logits.
    pub grad: Array2<f64>,
    /// Number of samples whose arg-max logit equals the label.
    pub correct: usize,
}

/// Mean negative log-likelihood of the labels under softmax(logits).
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<CrossEntropy> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(ReidError::InvalidBatchShape(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(ReidError::LabelOutOfRange { label, classes: k });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ReidError::NonFiniteInput("cross_entropy"));
    }
    let mut total = 0.0;
    let mut correct = 0;
    let mut grad = Array2::zeros((b, k));
    for ((row, mut g), &label) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for (gv, &z) in g.iter_mut().zip(row.iter()) {
            let e = (z - max).exp();
            *gv = e;
            denom += e;
        }
        total += (denom.ln() - (row[label] - max)).max(0.0);
        g.mapv_inplace(|e| e / denom / b as f64);
        g[label] -= 1.0 / b as f64;
        let argmax = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            )
            .0;
        correct += usize::from(argmax == label);
    }
    Ok(CrossEntropy {
        value: total / b.max(1) as f64,
        grad,
        correct,
    })
}

/// Objective: cross-entropy plus the (already λ-weighted) covariance term.
pub fn total_loss(ce: f64, cov: Option<f64>) -> f64 {
    ce + cov.unwrap_or(0.0)
}
