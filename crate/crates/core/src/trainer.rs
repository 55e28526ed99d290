//! Phase-wise incremental training and the evaluation protocol around it.
//!
//! Phase k trains the backbone together with head k−1. Phase 1 uses
//! cross-entropy alone; later phases freeze every earlier head and add the
//! covariance term. Batches are drawn from a seed derived from
//! `(seed, phase, iteration)`, so a run resumed from a checkpoint sees the
//! same batches it would have seen uninterrupted.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_backbone_weights, save_checkpoint, OptimizerSnapshot, TrainingCursor};
use crate::datasets::{derive_seed, ingest, ImageRecord, LabelMap, Layout, PairMask, PkSampler, Split, TaskSpec};
use crate::error::{ReidError, Result};
use crate::eval::{evaluate_sets, extract, DescriptorSource, EnsembleMode, EvalReport, NativeKernel, DEFAULT_TOPK};
use crate::images::ImageLoader;
use crate::losses::{covariance_loss, cross_entropy, total_loss, CovLossConfig, FeatureTap, TapFeatures};
use crate::model::{BackboneConfig, HeadConfig, HeadTap, MultiHeadModel, ParamSet, TaskBinding};
use crate::nn::{zero_grad, Module, Pass};
use crate::schedule::{make_optimizer, AdamConfig, ClrConfig, Optimizer, OptimizerConfig, OptimizerKind};

/// A task's records split by role, with its class mapping.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub labels: LabelMap,
    pub train: Vec<ImageRecord>,
    pub query: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
}

impl TaskData {
    pub fn from_records(
        name: impl Into<String>,
        root: impl Into<PathBuf>,
        layout: Layout,
        head_index: usize,
        records: Vec<ImageRecord>,
    ) -> Self {
        let spec = TaskSpec::from_records(name, root, layout, head_index, &records);
        let labels = LabelMap::from_records(&records);
        let mut data = Self {
            spec,
            labels,
            train: Vec::new(),
            query: Vec::new(),
            gallery: Vec::new(),
        };
        for r in records {
            match r.split {
                Split::Train => data.train.push(r),
                Split::Query => data.query.push(r),
                Split::Gallery => data.gallery.push(r),
            }
        }
        data
    }

    pub fn load(name: impl Into<String>, root: &Path, layout: Layout, head_index: usize) -> Result<Self> {
        let records = ingest(root, layout)?;
        Ok(Self::from_records(name, root, layout, head_index, records))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CeOnly,
    CePlusCov,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    /// 1-based.
    pub phase_index: usize,
    pub task: TaskSpec,
    pub epochs: usize,
    pub loss_mode: LossMode,
    pub frozen: BTreeSet<usize>,
}

impl PhasePlan {
    /// The plan the protocol prescribes for `phase_index`.
    pub fn standard(phase_index: usize, task: TaskSpec, epochs: usize) -> Self {
        Self {
            phase_index,
            task,
            epochs,
            loss_mode: if phase_index <= 1 {
                LossMode::CeOnly
            } else {
                LossMode::CePlusCov
            },
            frozen: (0..phase_index.saturating_sub(1)).collect(),
        }
    }

    pub fn active_head(&self) -> usize {
        self.phase_index - 1
    }

    pub fn validate(&self, model: &MultiHeadModel) -> Result<()> {
        let k = self.phase_index;
        let mismatch = |msg: String| Err(ReidError::PlanMismatch(msg));
        if k == 0 || k > model.num_heads() {
            return mismatch(format!("phase {k} but the model has {} heads", model.num_heads()));
        }
        if self.task.head_index != k - 1 {
            return mismatch(format!(
                "phase {k} trains head {} but task '{}' is bound to head {}",
                k - 1,
                self.task.name,
                self.task.head_index
            ));
        }
        let classes = model.head(k - 1)?.config().num_classes;
        if classes != self.task.num_classes {
            return mismatch(format!(
                "head {} has {classes} classes, task '{}' has {}",
                k - 1,
                self.task.name,
                self.task.num_classes
            ));
        }
        let expected_mode = if k == 1 { LossMode::CeOnly } else { LossMode::CePlusCov };
        if self.loss_mode != expected_mode {
            return mismatch(format!("phase {k} must use {expected_mode:?}"));
        }
        let expected_frozen: BTreeSet<usize> = (0..k - 1).collect();
        if self.frozen != expected_frozen {
            return mismatch(format!(
                "phase {k} must freeze heads {expected_frozen:?}, plan has {:?}",
                self.frozen
            ));
        }
        if self.epochs == 0 {
            return mismatch("a phase needs at least one epoch".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    #[serde(default = "defaults::p")]
    pub p: usize,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::yes")]
    pub replacement: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            p: defaults::p(),
            k: defaults::k(),
            replacement: true,
        }
    }
}

impl BatchConfig {
    pub fn size(&self) -> usize {
        self.p * self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClrSettings {
    #[serde(default = "defaults::base_lr")]
    pub base_lr: f64,
    #[serde(default = "defaults::max_lr")]
    pub max_lr: f64,
    /// Half-cycle length in iterations; `None` means two epochs.
    #[serde(default)]
    pub step_size: Option<usize>,
}

impl Default for ClrSettings {
    fn default() -> Self {
        Self {
            base_lr: defaults::base_lr(),
            max_lr: defaults::max_lr(),
            step_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default = "defaults::topk")]
    pub topk: Vec<usize>,
    #[serde(default)]
    pub ensemble: EnsembleMode,
    #[serde(default = "defaults::eval_batch")]
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            topk: defaults::topk(),
            ensemble: EnsembleMode::None,
            batch_size: defaults::eval_batch(),
        }
    }
}

/// Optional training variants, all off by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variants {
    /// Learning-rate multiplier for backbone parameters.
    #[serde(default = "defaults::one")]
    pub backbone_lr_scale: f64,
    /// Parameter-name prefixes excluded from training (e.g. `backbone.conv1`).
    #[serde(default)]
    pub frozen_prefixes: Vec<String>,
}

impl Default for Variants {
    fn default() -> Self {
        Self {
            backbone_lr_scale: 1.0,
            frozen_prefixes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub clr: ClrSettings,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub cov: CovLossConfig,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `train images / batch size`.
    #[serde(default)]
    pub iterations_per_epoch: Option<usize>,
    /// Evaluate every n epochs during a phase (the end of a phase is always evaluated by the protocol).
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default = "defaults::yes")]
    pub cache_images: bool,
    #[serde(default)]
    pub variants: Variants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: BatchConfig::default(),
            epochs: defaults::epochs(),
            optimizer: defaults::optimizer(),
            clr: ClrSettings::default(),
            momentum: defaults::momentum(),
            adam: AdamConfig::default(),
            cov: CovLossConfig::default(),
            seed: 0,
            iterations_per_epoch: None,
            eval_every: None,
            eval: EvalOptions::default(),
            checkpoint_dir: None,
            cache_images: true,
            variants: Variants::default(),
        }
    }
}

mod defaults {
    use crate::schedule::OptimizerKind;

    pub fn p() -> usize {
        8
    }
    pub fn k() -> usize {
        4
    }
    pub fn yes() -> bool {
        true
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn base_lr() -> f64 {
        1e-3
    }
    pub fn max_lr() -> f64 {
        6e-3
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::SgdClr
    }
    pub fn topk() -> Vec<usize> {
        super::DEFAULT_TOPK.to_vec()
    }
    pub fn eval_batch() -> usize {
        64
    }
    pub fn slope() -> f64 {
        0.01
    }
    pub fn tap() -> crate::model::HeadTap {
        crate::model::HeadTap::Block2
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch.p < 2 || self.batch.k < 1 {
            return Err(ReidError::InvalidBatchShape(format!(
                "P = {}, K = {}: need P >= 2 and K >= 1",
                self.batch.p, self.batch.k
            )));
        }
        if self.epochs == 0 {
            return Err(ReidError::Config("epochs must be >= 1".into()));
        }
        if self.iterations_per_epoch == Some(0) || self.eval_every == Some(0) {
            return Err(ReidError::Config(
                "iterations_per_epoch and eval_every must be >= 1".into(),
            ));
        }
        ClrConfig::new(self.clr.base_lr, self.clr.max_lr, self.clr.step_size.unwrap_or(1))?;
        self.cov.validate()?;
        if self.eval.topk.is_empty() || self.eval.topk.contains(&0) || self.eval.batch_size == 0 {
            return Err(ReidError::Config(
                "eval.topk must be non-empty positive ranks and batch_size >= 1".into(),
            ));
        }
        if !(self.variants.backbone_lr_scale >= 0.0 && self.variants.backbone_lr_scale.is_finite()) {
            return Err(ReidError::Config("backbone_lr_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, train_images: usize) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| (train_images / self.batch.size()).max(1))
    }

    pub fn optimizer_config(&self, iterations_per_epoch: usize) -> Result<OptimizerConfig> {
        let step = self.clr.step_size.unwrap_or(2 * iterations_per_epoch);
        Ok(OptimizerConfig {
            kind: self.optimizer,
            clr: ClrConfig::new(self.clr.base_lr, self.clr.max_lr, step)?,
            momentum: self.momentum,
            adam: self.adam,
        })
    }
}

/// Shared settings for every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSettings {
    #[serde(default = "defaults::slope")]
    pub negative_slope: f64,
    #[serde(default = "defaults::tap")]
    pub tap: HeadTap,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self {
            negative_slope: defaults::slope(),
            tap: defaults::tap(),
        }
    }
}

/// One head per task, sized from the task's class count. Pretrained backbone
/// weights are loaded when the config asks for them.
pub fn build_model(
    backbone: &BackboneConfig,
    head: &HeadSettings,
    tasks: &[TaskSpec],
    seed: u64,
) -> Result<MultiHeadModel> {
    let heads = tasks
        .iter()
        .map(|t| HeadConfig {
            in_channels: backbone.output_channels,
            num_classes: t.num_classes,
            negative_slope: head.negative_slope,
            tap: head.tap,
        })
        .collect();
    let mut model = MultiHeadModel::new(backbone.clone(), heads, seed)?;
    if backbone.pretrained {
        let path = backbone
            .weights
            .as_ref()
            .ok_or_else(|| ReidError::Config("pretrained backbone needs a weights path".into()))?;
        load_backbone_weights(model.backbone_mut(), path)?;
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub ce: f64,
    pub cov: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub phase: usize,
    pub task: String,
    pub rank1: f64,
    pub rank20: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub event: String,
    pub unix_seconds: f64,
}

#[derive(Debug)]
struct LogSinks {
    iterations: LineWriter<File>,
    evals: LineWriter<File>,
}

/// Append-only training record. With files attached every entry is written
/// as one JSON line as soon as it is recorded.
#[derive(Debug, Default)]
pub struct RunLog {
    pub iterations: Vec<IterRecord>,
    pub evals: Vec<EvalSnapshot>,
    pub stamps: Vec<Stamp>,
    sinks: Option<LogSinks>,
}

pub const ITERATIONS_LOG: &str = "iterations.jsonl";
pub const EVALS_LOG: &str = "evals.jsonl";

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also append records to `dir/iterations.jsonl` and `dir/evals.jsonl`.
    pub fn with_files(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<LineWriter<File>> {
            Ok(LineWriter::new(
                OpenOptions::new().create(true).append(true).open(dir.join(name))?,
            ))
        };
        Ok(Self {
            sinks: Some(LogSinks {
                iterations: open(ITERATIONS_LOG)?,
                evals: open(EVALS_LOG)?,
            }),
            ..Self::default()
        })
    }

    pub fn next_iter(&self) -> usize {
        self.iterations.last().map_or(0, |r| r.iter + 1)
    }

    pub fn record_iter(&mut self, lr: f64, ce: f64, cov: f64, total: f64) -> Result<IterRecord> {
        let rec = IterRecord {
            iter: self.next_iter(),
            lr,
            ce,
            cov,
            total,
        };
        if let Some(s) = &mut self.sinks {
            serde_json::to_writer(&mut s.iterations, &rec)?;
            s.iterations.write_all(b"\n")?;
        }
        self.iterations.push(rec);
        Ok(rec)
    }

    pub fn record_eval(&mut self, snap: EvalSnapshot) -> Result<()> {
        if let Some(s) = &mut self.sinks {
            serde_json::to_writer(&mut s.evals, &snap)?;
            s.evals.write_all(b"\n")?;
        }
        self.evals.push(snap);
        Ok(())
    }

    pub fn stamp(&mut self, event: impl Into<String>) {
        self.stamps.push(Stamp {
            event: event.into(),
            unix_seconds: now(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub ce: f64,
    pub cov: f64,
    pub total: f64,
    pub correct: usize,
    /// False when the loss was non-finite and no update was made.
    pub applied: bool,
}

/// One optimization step: forward, losses, backward, update.
///
/// Frozen heads that feed the covariance term run on their running
/// statistics and pass gradient to the backbone without accumulating any
/// into their own parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut MultiHeadModel,
    optimizer: &mut Optimizer,
    active: usize,
    mode: LossMode,
    cov_cfg: &CovLossConfig,
    images: &Array4<f64>,
    labels: &[usize],
    mask: &PairMask,
) -> Result<StepStats> {
    zero_grad(model);
    let features = model.forward_backbone(images, Pass::TRAIN)?;
    let taps = match mode {
        LossMode::CeOnly => Vec::new(),
        LossMode::CePlusCov => cov_cfg.tap.taps(active),
    };
    let mut tap_features = TapFeatures::new();
    for &tap in &taps {
        match tap {
            FeatureTap::Backbone => {
                tap_features.insert(tap, features.clone());
            }
            FeatureTap::Block2 { head } if head != active => {
                let out = model.forward_head(head, &features, Pass::FROZEN)?;
                tap_features.insert(tap, out.tap2);
            }
            FeatureTap::Block2 { .. } => {}
        }
    }
    let out = model.forward_head(active, &features, Pass::TRAIN)?;
    let ce = cross_entropy(&out.logits, labels)?;
    let active_tap = FeatureTap::Block2 { head: active };
    if taps.contains(&active_tap) {
        tap_features.insert(active_tap, out.tap2);
    }
    let cov = match mode {
        LossMode::CeOnly => None,
        LossMode::CePlusCov => Some(covariance_loss(&tap_features, mask, cov_cfg, active)?),
    };
    let cov_value = cov.as_ref().map_or(0.0, |c| c.value);
    let total = total_loss(ce.value, cov.as_ref().map(|c| c.value));
    let lr = optimizer.current_lr();
    let mut stats = StepStats {
        lr,
        ce: ce.value,
        cov: cov_value,
        total,
        correct: ce.correct,
        applied: false,
    };
    if !total.is_finite() {
        return Ok(stats);
    }

    let grads = cov.map(|c| c.grads).unwrap_or_default();
    let mut dfeatures = model.backward_head(active, Some(&ce.grad), None, grads.get(&active_tap))?;
    for (tap, g) in &grads {
        match *tap {
            FeatureTap::Backbone => dfeatures += g,
            FeatureTap::Block2 { head } if head != active => {
                dfeatures += &model.backward_head(head, None, None, Some(g))?;
            }
            FeatureTap::Block2 { .. } => {}
        }
    }
    model.backward_backbone(&dfeatures);
    optimizer.step(model);
    stats.applied = true;
    Ok(stats)
}

/// State to continue a phase from a checkpoint.
#[derive(Debug, Clone)]
pub struct Resume {
    pub optimizer: OptimizerSnapshot,
    pub epochs_done: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub epochs_run: usize,
    pub iterations: usize,
    /// Fraction of training samples classified correctly in the last epoch.
    pub train_accuracy: f64,
    pub last: Option<StepStats>,
}

/// Seed of the batch drawn at `iteration` of `phase`.
pub fn step_seed(seed: u64, phase: usize, iteration: usize) -> u64 {
    derive_seed(derive_seed(seed, phase as u64), iteration as u64)
}

fn trainable_set(model: &MultiHeadModel, phase: usize, variants: &Variants) -> Result<ParamSet> {
    let base = model.trainable_parameters(phase)?;
    Ok(base
        .iter()
        .filter(|n| !variants.frozen_prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .map(str::to_string)
        .collect())
}

fn dump_nonfinite(
    dir: &Path,
    phase: usize,
    iter: usize,
    stats: &StepStats,
    batch: &[ImageRecord],
    model: &MultiHeadModel,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut norms = serde_json::Map::new();
    model.visit("", &mut |name, t| {
        let n = t.value.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.insert(name.to_string(), serde_json::json!(n));
    });
    let dump = serde_json::json!({
        "phase": phase,
        "iter": iter,
        "lr": stats.lr,
        "ce": stats.ce,
        "cov": stats.cov,
        "total": stats.total,
        "batch": batch.iter().map(|r| r.path.display().to_string()).collect::<Vec<_>>(),
        "parameter_norms": norms,
    });
    let path = dir.join(format!("nonfinite_phase{phase}_iter{iter}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&dump)?)?;
    Ok(path)
}

pub fn checkpoint_path(dir: &Path, phase: usize) -> PathBuf {
    dir.join(format!("phase{phase}_last.ckpt"))
}

/// Train one phase. Only `trainable_parameters(phase)` change; a checkpoint
/// is written at the end of every epoch when `cfg.checkpoint_dir` is set.
pub fn train_phase(
    model: &mut MultiHeadModel,
    plan: &PhasePlan,
    data: &TaskData,
    cfg: &TrainConfig,
    log: &mut RunLog,
    resume: Option<Resume>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    plan.validate(model)?;
    if data.labels.len() != plan.task.num_classes {
        return Err(ReidError::PlanMismatch(format!(
            "task '{}' data has {} classes, plan expects {}",
            plan.task.name,
            data.labels.len(),
            plan.task.num_classes
        )));
    }
    if plan.loss_mode == LossMode::CePlusCov && cfg.batch.k < 2 {
        return Err(ReidError::InvalidBatchShape(
            "the covariance term needs K >= 2 to form positive pairs".into(),
        ));
    }
    let phase = plan.phase_index;
    let active = plan.active_head();
    for &h in &plan.frozen {
        if !model.is_trained(h)? {
            return Err(ReidError::UntrainedHead(h));
        }
        model.set_frozen(h, true)?;
    }
    model.set_frozen(active, false)?;

    let ipe = cfg.iterations_per_epoch(data.train.len());
    let opt_cfg = cfg.optimizer_config(ipe)?;
    let mut optimizer = make_optimizer(trainable_set(model, phase, &cfg.variants)?, &opt_cfg)?;
    if cfg.variants.backbone_lr_scale != 1.0 {
        optimizer = optimizer.with_lr_scale("backbone.", cfg.variants.backbone_lr_scale);
    }
    let start_epoch = match resume {
        Some(r) => {
            if r.optimizer.kind != optimizer.kind() {
                return Err(ReidError::PlanMismatch(format!(
                    "checkpoint optimizer is {}, config asks for {}",
                    r.optimizer.kind,
                    optimizer.kind()
                )));
            }
            optimizer.restore_state(r.optimizer.state, r.optimizer.iteration);
            r.epochs_done
        }
        None => 0,
    };

    let (h, w) = model.backbone().config().input_size;
    let loader = if cfg.cache_images {
        ImageLoader::new(h, w).with_cache()
    } else {
        ImageLoader::new(h, w)
    };
    let sampler = PkSampler {
        p: cfg.batch.p,
        k: cfg.batch.k,
        replacement: cfg.batch.replacement,
    };
    let dump_dir = cfg.checkpoint_dir.clone().unwrap_or_else(std::env::temp_dir);

    log.stamp(format!("phase {phase} start"));
    let mut outcome = PhaseOutcome {
        epochs_run: 0,
        iterations: 0,
        train_accuracy: 0.0,
        last: None,
    };
    for epoch in start_epoch..plan.epochs {
        let mut correct = 0;
        let mut seen = 0;
        for _ in 0..ipe {
            let it = optimizer.iteration();
            let (batch, mask) = sampler.sample(&data.train, step_seed(cfg.seed, phase, it))?;
            let images = loader.batch(&batch)?;
            let labels = batch
                .iter()
                .map(|r| {
                    data.labels.class_of(r.person_id).ok_or_else(|| {
                        ReidError::PlanMismatch(format!(
                            "person {} has no class in task '{}'",
                            r.person_id, plan.task.name
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let stats = train_step(
                model,
                &mut optimizer,
                active,
                plan.loss_mode,
                &cfg.cov,
                &images,
                &labels,
                &mask,
            )?;
            if !stats.applied {
                let dump = dump_nonfinite(&dump_dir, phase, it, &stats, &batch, model)?;
                return Err(ReidError::NonFiniteLoss {
                    iter: it,
                    ce: stats.ce,
                    cov: stats.cov,
                    dump,
                });
            }
            log.record_iter(stats.lr, stats.ce, stats.cov, stats.total)?;
            correct += stats.correct;
            seen += labels.len();
            outcome.iterations += 1;
            outcome.last = Some(stats);
        }
        outcome.epochs_run += 1;
        outcome.train_accuracy = correct as f64 / seen.max(1) as f64;
        log::info!(
            "phase {phase} epoch {}/{}: train accuracy {:.3}, loss {:.4}",
            epoch + 1,
            plan.epochs,
            outcome.train_accuracy,
            outcome.last.map_or(f64::NAN, |s| s.total)
        );

        model.mark_trained(active)?;
        model.bind_task(
            active,
            TaskBinding {
                name: plan.task.name.clone(),
                labels: data.labels.clone(),
            },
        )?;
        if epoch + 1 == plan.epochs {
            model.set_phase(phase);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            fs::create_dir_all(dir)?;
            let cursor = TrainingCursor {
                phase,
                epoch: epoch + 1,
            };
            save_checkpoint(&checkpoint_path(dir, phase), model, Some(&optimizer), Some(cursor))?;
        }
        if let Some(every) = cfg.eval_every {
            if (epoch + 1) % every == 0 && epoch + 1 < plan.epochs {
                let report = evaluate(model, data, active, &cfg.eval, None)?;
                log.record_eval(snapshot(phase, &plan.task.name, &report))?;
            }
        }
    }
    log.stamp(format!("phase {phase} end"));
    Ok(outcome)
}

fn snapshot(phase: usize, task: &str, r: &EvalReport) -> EvalSnapshot {
    EvalSnapshot {
        phase,
        task: task.to_string(),
        rank1: r.rank1,
        rank20: r.rank20,
        map: r.map,
    }
}

/// Rank the task's gallery for each of its queries using `head`.
pub fn evaluate(
    model: &mut MultiHeadModel,
    data: &TaskData,
    head: usize,
    opts: &EvalOptions,
    kernel: Option<&NativeKernel>,
) -> Result<EvalReport> {
    let source = DescriptorSource::for_model(model, head, opts.ensemble)?;
    let (h, w) = model.backbone().config().input_size;
    let loader = ImageLoader::new(h, w);
    let query = extract(model, &data.query, &loader, source, opts.batch_size)?;
    let gallery = extract(model, &data.gallery, &loader, source, opts.batch_size)?;
    evaluate_sets(&query, &gallery, &opts.topk, kernel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalRow {
    /// Phase after which the evaluation ran.
    pub phase: usize,
    pub task: String,
    /// True for re-evaluations of a task trained in an earlier phase.
    pub reeval: bool,
    pub report: EvalReport,
}

#[derive(Debug)]
pub struct IncrementalOutcome {
    pub model: MultiHeadModel,
    pub rows: Vec<IncrementalRow>,
    pub phases: Vec<PhaseOutcome>,
}

/// Train task 1, evaluate it; train task 2 with head 1 frozen, evaluate it,
/// then re-evaluate task 1 without training; and so on for more tasks.
///
/// Yields n(n+1)/2 rows for n tasks. Each row is handed to `on_row` as soon
/// as it exists, so callers can persist partial results.
pub fn run_incremental(
    model: MultiHeadModel,
    tasks: &[TaskData],
    cfg: &TrainConfig,
    kernel: Option<&NativeKernel>,
    log: &mut RunLog,
    on_row: &mut dyn FnMut(&IncrementalRow) -> Result<()>,
) -> Result<IncrementalOutcome> {
    if tasks.len() < 2 {
        return Err(ReidError::Config(format!(
            "the incremental protocol needs at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    if model.num_heads() != tasks.len() {
        return Err(ReidError::PlanMismatch(format!(
            "{} tasks for a model with {} heads",
            tasks.len(),
            model.num_heads()
        )));
    }
    cfg.validate()?;
    let mut model = model;
    let mut rows = Vec::new();
    let mut phases = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let phase = i + 1;
        let plan = PhasePlan::standard(phase, task.spec.clone(), cfg.epochs);
        phases.push(train_phase(&mut model, &plan, task, cfg, log, None)?);
        let order = std::iter::once(i).chain(0..i);
        for j in order {
            let report = evaluate(&mut model, &tasks[j], j, &cfg.eval, kernel)?;
            log.record_eval(snapshot(phase, &tasks[j].spec.name, &report))?;
            let row = IncrementalRow {
                phase,
                task: tasks[j].spec.name.clone(),
                reeval: j != i,
                report,
            };
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(IncrementalOutcome { model, rows, phases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{write_fixture, FixtureSpec};

    fn fixture(ids: std::ops::RangeInclusive<i32>, head: usize) -> (tempfile::TempDir, TaskData) {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = FixtureSpec::new(ids);
        spec.train_per_id = 4;
        write_fixture(dir.path(), &spec).unwrap();
        let data = TaskData::load(format!("t{head}"), dir.path(), Layout::Market, head).unwrap();
        (dir, data)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch: BatchConfig {
                p: 4,
                k: 2,
                replacement: true,
            },
            epochs: 1,
            iterations_per_epoch: Some(2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn standard_plans_follow_the_protocol() {
        let (_d, data) = fixture(1..=4, 0);
        let model = build_model(
            &BackboneConfig::tiny(),
            &HeadSettings::default(),
            &[data.spec.clone(), data.spec.clone()],
            0,
        )
        .unwrap();
        let p1 = PhasePlan::standard(1, data.spec.clone(), 3);
        assert_eq!(p1.loss_mode, LossMode::CeOnly);
        assert!(p1.frozen.is_empty());
        p1.validate(&model).unwrap();

        let mut t2 = data.spec.clone();
        t2.head_index = 1;
        let p2 = PhasePlan::standard(2, t2.clone(), 3);
        assert_eq!(p2.frozen, BTreeSet::from([0]));
        p2.validate(&model).unwrap();

        let mut bad = p2.clone();
        bad.loss_mode = LossMode::CeOnly;
        assert!(matches!(bad.validate(&model), Err(ReidError::PlanMismatch(_))));
        let mut bad = p2.clone();
        bad.frozen.clear();
        assert!(matches!(bad.validate(&model), Err(ReidError::PlanMismatch(_))));
        assert!(matches!(
            PhasePlan::standard(3, t2, 3).validate(&model),
            Err(ReidError::PlanMismatch(_))
        ));
    }

    #[test]
    fn lambda_zero_makes_total_equal_ce() {
        let (_a, t1) = fixture(1..=4, 0);
        let (_b, mut t2) = fixture(11..=14, 1);
        t2.spec.head_index = 1;
        let mut model = build_model(
            &BackboneConfig::tiny(),
            &HeadSettings::default(),
            &[t1.spec.clone(), t2.spec.clone()],
            1,
        )
        .unwrap();
        let mut cfg = quick_cfg();
        let mut log = RunLog::new();
        train_phase(
            &mut model,
            &PhasePlan::standard(1, t1.spec.clone(), 1),
            &t1,
            &cfg,
            &mut log,
            None,
        )
        .unwrap();
        cfg.cov.lambda = 0.0;
        let start = log.iterations.len();
        train_phase(
            &mut model,
            &PhasePlan::standard(2, t2.spec.clone(), 1),
            &t2,
            &cfg,
            &mut log,
            None,
        )
        .unwrap();
        for r in &log.iterations[start..] {
            assert_eq!(r.total, r.ce);
        }
        let iters: Vec<usize> = log.iterations.iter().map(|r| r.iter).collect();
        assert_eq!(iters, (0..iters.len()).collect::<Vec<_>>());
        assert_eq!(model.phase(), 2);
    }

    #[test]
    fn second_phase_requires_a_trained_first_head() {
        let (_a, t1) = fixture(1..=4, 0);
        let mut t2 = t1.clone();
        t2.spec.head_index = 1;
        let mut model = build_model(
            &BackboneConfig::tiny(),
            &HeadSettings::default(),
            &[t1.spec.clone(), t2.spec.clone()],
            1,
        )
        .unwrap();
        let err = train_phase(
            &mut model,
            &PhasePlan::standard(2, t2.spec.clone(), 1),
            &t2,
            &quick_cfg(),
            &mut RunLog::new(),
            None,
        );
        assert!(matches!(err, Err(ReidError::UntrainedHead(0))));
    }

    #[test]
    fn nonfinite_loss_aborts_with_a_dump() {
        let (_a, t1) = fixture(1..=4, 0);
        let mut t2 = t1.clone();
        t2.spec.head_index = 1;
        let mut model = build_model(
            &BackboneConfig::tiny(),
            &HeadSettings::default(),
            &[t1.spec.clone(), t2.spec.clone()],
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg();
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        train_phase(
            &mut model,
            &PhasePlan::standard(1, t1.spec.clone(), 1),
            &t1,
            &cfg,
            &mut RunLog::new(),
            None,
        )
        .unwrap();
        cfg.cov.alpha = f64::MAX;
        cfg.cov.lambda = f64::MAX;
        let err = train_phase(
            &mut model,
            &PhasePlan::standard(2, t2.spec.clone(), 1),
            &t2,
            &cfg,
            &mut RunLog::new(),
            None,
        )
        .unwrap_err();
        match err {
            ReidError::NonFiniteLoss { dump, .. } => {
                let v: serde_json::Value = serde_json::from_slice(&fs::read(dump).unwrap()).unwrap();
                assert_eq!(v["phase"], 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn run_log_writes_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = RunLog::with_files(dir.path()).unwrap();
        log.record_iter(0.001, 1.5, 0.0, 1.5).unwrap();
        log.record_iter(0.002, 1.25, -0.5, 0.75).unwrap();
        log.record_eval(EvalSnapshot {
            phase: 1,
            task: "a".into(),
            rank1: 0.5,
            rank20: 1.0,
            map: 0.4,
        })
        .unwrap();
        drop(log);
        let text = fs::read_to_string(dir.path().join(ITERATIONS_LOG)).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[1],
            serde_json::json!({"iter":1,"lr":0.002,"ce":1.25,"cov":-0.5,"total":0.75})
        );
        let evals = fs::read_to_string(dir.path().join(EVALS_LOG)).unwrap();
        assert_eq!(
            serde_json::from_str::<serde_json::Value>(evals.trim()).unwrap(),
            serde_json::json!({"phase":1,"task":"a","rank1":0.5,"rank20":1.0,"map":0.4})
        );
    }

    #[test]
    fn single_task_is_rejected() {
        let (_a, t1) = fixture(1..=4, 0);
        let model = build_model(
            &BackboneConfig::tiny(),
            &HeadSettings::default(),
            std::slice::from_ref(&t1.spec),
            0,
        )
        .unwrap();
        let r = run_incremental(model, &[t1], &quick_cfg(), None, &mut RunLog::new(), &mut |_| Ok(()));
        assert!(matches!(r, Err(ReidError::Config(_))));
    }

    #[test]
    fn config_round_trips_with_defaults_materialized() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(text.contains("\"alpha\":1e-9"));
    }
}
