//! The five user commands. Each returns the files it wrote.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use reid_core::checkpoint::load_checkpoint;
use reid_core::datasets::{ingest as ingest_tree, IngestSummary, Layout};
use reid_core::eval::format::{read_embeddings, write_embeddings};
use reid_core::eval::{evaluate_sets, extract, DescriptorSource, EvalReport, KernelChoice, NativeKernel, DEFAULT_TOPK};
use reid_core::images::ImageLoader;
use reid_core::model::MultiHeadModel;
use reid_core::trainer::{
    build_model, checkpoint_path, evaluate, run_incremental as run_protocol, train_phase, PhasePlan, Resume, RunLog,
    TaskData, TrainConfig,
};
use reid_core::ReidError;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::report::{finalize_sweep, write_sweep, ResultRow, ResultsWriter, SweepRow};

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub kernel: Option<KernelChoice>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(k) = self.kernel {
            cfg.kernel = k;
        }
        cfg.validate()
    }

    /// Output directory when no config is involved.
    pub fn out_or_default(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Kernel for commands that run without a config.
    pub fn native_kernel(&self) -> Option<NativeKernel> {
        match self.kernel {
            Some(KernelChoice::Native) => Some(NativeKernel::from_env()),
            _ => None,
        }
    }
}

/// Ingest every configured task; task `i` is bound to head `i`.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskData>> {
    let mut out = Vec::with_capacity(cfg.tasks.len());
    for (i, t) in cfg.tasks.iter().enumerate() {
        let data = TaskData::load(t.name.clone(), &t.root, t.layout, i)?;
        if let Some(n) = t.num_classes {
            if n != data.labels.len() {
                return Err(ReidError::PlanMismatch(format!(
                    "task '{}' declares {n} classes but its train split has {} identities",
                    t.name,
                    data.labels.len()
                ))
                .into());
            }
        }
        log::info!(
            "task '{}': {} classes, {} train images",
            t.name,
            data.labels.len(),
            data.train.len()
        );
        out.push(data);
    }
    Ok(out)
}

fn fresh_model(cfg: &ExperimentConfig, tasks: &[TaskData]) -> Result<MultiHeadModel> {
    let specs: Vec<_> = tasks.iter().map(|t| t.spec.clone()).collect();
    Ok(build_model(&cfg.backbone, &cfg.head, &specs, cfg.seed)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(path.to_path_buf())
}

fn print_rows(rows: &[ResultRow]) {
    println!("{:<28} {:>8} {:>8} {:>8}", "dataset", "rank1", "rank20", "mAP");
    for r in rows {
        let name = if r.reeval {
            format!("{} (re-eval)", r.dataset)
        } else {
            r.dataset.clone()
        };
        println!("{name:<28} {:>8.4} {:>8.4} {:>8.4}", r.rank1, r.rank20, r.map);
    }
}

// ---- ingest ----

pub enum IngestSource<'a> {
    Tree { root: &'a Path, layout: Layout },
    Config(&'a ExperimentConfig),
}

pub fn ingest(source: IngestSource<'_>, out: &Path) -> Result<Vec<PathBuf>> {
    let trees: Vec<(String, PathBuf, Layout)> = match source {
        IngestSource::Tree { root, layout } => {
            let name = root
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("dataset")
                .to_string();
            vec![(name, root.to_path_buf(), layout)]
        }
        IngestSource::Config(cfg) => cfg
            .tasks
            .iter()
            .map(|t| (t.name.clone(), t.root.clone(), t.layout))
            .collect(),
    };
    fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    let mut summaries = BTreeMap::new();
    for (name, root, layout) in trees {
        let records = ingest_tree(&root, layout)?;
        let path = out.join(format!("{name}.manifest.jsonl"));
        let mut w = BufWriter::new(File::create(&path)?);
        for r in &records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        outputs.push(path);
        summaries.insert(name, IngestSummary::of(&records));
    }
    println!("{}", serde_json::to_string_pretty(&summaries)?);
    outputs.push(write_json(&out.join("summary.json"), &summaries)?);
    Ok(outputs)
}

// ---- train ----

fn previous_phase(cfg: &ExperimentConfig, phase: usize) -> Result<MultiHeadModel> {
    let path = checkpoint_path(&cfg.checkpoint_dir(), phase - 1);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "phase {phase} needs {} (run `train --phase {}` first)",
            path.display(),
            phase - 1
        )));
    }
    let ckpt = load_checkpoint(&path)?;
    let done = ckpt
        .cursor
        .is_some_and(|c| c.phase == phase - 1 && c.epoch >= cfg.epochs);
    if ckpt.model.phase() != phase - 1 || !done {
        return Err(ReidError::PlanMismatch(format!("{} has not finished phase {}", path.display(), phase - 1)).into());
    }
    Ok(ckpt.model)
}

/// Train phase `phase` (1-based) on task `phase - 1`, then evaluate every
/// task trained so far.
pub fn train(cfg: &ExperimentConfig, phase: usize, resume: bool) -> Result<Vec<PathBuf>> {
    if phase == 0 || phase > cfg.tasks.len() {
        return Err(CliError::Usage(format!(
            "--phase must be in 1..={} for this config",
            cfg.tasks.len()
        )));
    }
    let tasks = load_tasks(cfg)?;
    let tc: TrainConfig = cfg.train_config();
    let own = checkpoint_path(&cfg.checkpoint_dir(), phase);

    let mut resume_state = None;
    let mut model = None;
    if resume && own.is_file() {
        let ckpt = load_checkpoint(&own)?;
        match (ckpt.cursor, ckpt.optimizer) {
            (Some(c), Some(opt)) if c.phase == phase => {
                log::info!("resuming phase {phase} after epoch {}", c.epoch);
                resume_state = Some(Resume {
                    optimizer: opt,
                    epochs_done: c.epoch,
                });
                model = Some(ckpt.model);
            }
            _ => {
                return Err(ReidError::PlanMismatch(format!("{} cannot resume phase {phase}", own.display())).into());
            }
        }
    }
    let mut model = match model {
        Some(m) => m,
        None if phase == 1 => fresh_model(cfg, &tasks)?,
        None => previous_phase(cfg, phase)?,
    };

    let mut log = RunLog::with_files(&cfg.log_dir())?;
    let task = &tasks[phase - 1];
    let plan = PhasePlan::standard(phase, task.spec.clone(), cfg.epochs);
    if resume_state.as_ref().is_some_and(|r| r.epochs_done >= cfg.epochs) {
        log::info!("phase {phase} already complete");
    } else {
        let outcome = train_phase(&mut model, &plan, task, &tc, &mut log, resume_state)?;
        log::info!(
            "phase {phase}: {} epochs, {} iterations, train accuracy {:.3}",
            outcome.epochs_run,
            outcome.iterations,
            outcome.train_accuracy
        );
    }

    let kernel = cfg.native_kernel();
    let mut writer = ResultsWriter::create(&cfg.output_dir, &format!("phase{phase}_eval"))?;
    for j in std::iter::once(phase - 1).chain(0..phase - 1) {
        let report = evaluate(&mut model, &tasks[j], j, &cfg.eval, kernel.as_ref())?;
        writer.push(ResultRow::new(phase, &tasks[j].spec.name, j != phase - 1, &report))?;
    }
    print_rows(writer.rows());
    let mut outputs = vec![own, cfg.log_dir()];
    outputs.extend(writer.finish()?);
    Ok(outputs)
}

// ---- eval ----

pub enum EvalSource<'a> {
    /// Two REIDEMB1 files.
    Embeddings { query: &'a Path, gallery: &'a Path },
    /// A checkpoint evaluated on the configured tasks; `None` picks the
    /// latest phase checkpoint under the output directory.
    Checkpoint {
        cfg: &'a ExperimentConfig,
        path: Option<&'a Path>,
        emit_embeddings: Option<&'a Path>,
    },
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let re = regex::Regex::new(r"^phase(\d+)_last\.ckpt$").expect("static regex");
    let mut best: Option<(usize, PathBuf)> = None;
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(phase) = re.captures(name).and_then(|c| c[1].parse::<usize>().ok()) {
                if best.as_ref().is_none_or(|(p, _)| phase > *p) {
                    best = Some((phase, path));
                }
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| CliError::Usage(format!("no phase checkpoints in {}", dir.display())))
}

pub fn eval(source: EvalSource<'_>, out: &Path, ov: &Overrides) -> Result<Vec<PathBuf>> {
    match source {
        EvalSource::Embeddings { query, gallery } => {
            let q = read_embeddings(query)?;
            let g = read_embeddings(gallery)?;
            let report: EvalReport = evaluate_sets(&q, &g, &DEFAULT_TOPK, ov.native_kernel().as_ref())?;
            let mut writer = ResultsWriter::create(out, "eval")?;
            writer.push(ResultRow::new(0, &query.display().to_string(), false, &report))?;
            print_rows(writer.rows());
            writer.finish()
        }
        EvalSource::Checkpoint {
            cfg,
            path,
            emit_embeddings,
        } => {
            let path = match path {
                Some(p) => p.to_path_buf(),
                None => latest_checkpoint(&cfg.checkpoint_dir())?,
            };
            log::info!("evaluating {}", path.display());
            let mut model = load_checkpoint(&path)?.model;
            let tasks = load_tasks(cfg)?;
            if model.num_heads() != tasks.len() {
                return Err(ReidError::PlanMismatch(format!(
                    "checkpoint has {} heads, config has {} tasks",
                    model.num_heads(),
                    tasks.len()
                ))
                .into());
            }
            let kernel = cfg.native_kernel();
            let (h, w) = model.backbone().config().input_size;
            let loader = ImageLoader::new(h, w);
            let mut writer = ResultsWriter::create(out, "eval")?;
            let mut outputs = Vec::new();
            for (i, task) in tasks.iter().enumerate() {
                if !model.is_trained(i)? {
                    continue;
                }
                if let Some(bound) = model.task(i)? {
                    if bound.name != task.spec.name {
                        return Err(ReidError::PlanMismatch(format!(
                            "head {i} was trained on '{}', config names '{}'",
                            bound.name, task.spec.name
                        ))
                        .into());
                    }
                }
                let src = DescriptorSource::for_model(&model, i, cfg.eval.ensemble)?;
                let q = extract(&mut model, &task.query, &loader, src, cfg.eval.batch_size)?;
                let g = extract(&mut model, &task.gallery, &loader, src, cfg.eval.batch_size)?;
                if let Some(dir) = emit_embeddings {
                    fs::create_dir_all(dir)?;
                    for (role, set) in [("query", &q), ("gallery", &g)] {
                        let p = dir.join(format!("{}_{role}.emb", task.spec.name));
                        write_embeddings(&p, set)?;
                        outputs.push(p);
                    }
                }
                let report = evaluate_sets(&q, &g, &cfg.eval.topk, kernel.as_ref())?;
                writer.push(ResultRow::new(model.phase(), &task.spec.name, false, &report))?;
            }
            print_rows(writer.rows());
            outputs.extend(writer.finish()?);
            Ok(outputs)
        }
    }
}

// ---- run-incremental ----

/// Fails before touching any data when fewer than two tasks are configured.
pub fn check_incremental(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.tasks.len() < 2 {
        return Err(CliError::Config(format!(
            "run-incremental needs at least 2 tasks, config has {}",
            cfg.tasks.len()
        )));
    }
    Ok(())
}

fn incremental_rows(
    cfg: &ExperimentConfig,
    tasks: &[TaskData],
    kernel: Option<&NativeKernel>,
    quiet: bool,
) -> Result<(Vec<ResultRow>, Vec<PathBuf>)> {
    let mut writer = ResultsWriter::create(&cfg.output_dir, "results")?;
    let mut log = RunLog::with_files(&cfg.log_dir())?;
    let model = fresh_model(cfg, tasks)?;
    let mut write_err: Option<CliError> = None;
    let mut on_row = |row: &reid_core::trainer::IncrementalRow| -> reid_core::Result<()> {
        writer.push(ResultRow::from(row)).map_err(|e| {
            let msg = e.to_string();
            write_err = Some(e);
            ReidError::Io(std::io::Error::other(msg))
        })
    };
    let outcome = run_protocol(model, tasks, &cfg.train_config(), kernel, &mut log, &mut on_row);
    if let Some(e) = write_err {
        return Err(e);
    }
    outcome?;
    let rows = writer.rows().to_vec();
    if !quiet {
        print_rows(&rows);
    }
    let mut outputs = writer.finish()?;
    outputs.push(cfg.log_dir());
    outputs.push(cfg.checkpoint_dir());
    Ok((rows, outputs))
}

pub fn run_incremental(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    check_incremental(cfg)?;
    let tasks = load_tasks(cfg)?;
    let kernel = cfg.native_kernel();
    Ok(incremental_rows(cfg, &tasks, kernel.as_ref(), false)?.1)
}

// ---- sweep ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    Lambda,
    #[value(name = "batch_size", alias = "batch-size")]
    BatchSize,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::BatchSize => "batch_size",
        }
    }
}

/// Config for one sweep point, rooted in its own directory.
fn sweep_point(base: &ExperimentConfig, param: SweepParam, value: f64, root: &Path) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.output_dir = root.join(format!("{}_{value}", param.name()));
    match param {
        SweepParam::Lambda => {
            if !(value.is_finite() && value >= 0.0) {
                return Err(CliError::Usage(format!("lambda must be finite and >= 0, got {value}")));
            }
            cfg.cov.lambda = value;
        }
        SweepParam::BatchSize => {
            let k = cfg.batch.k;
            if value.fract() != 0.0 || value < 1.0 || !(value as usize).is_multiple_of(k) {
                return Err(CliError::Usage(format!(
                    "batch size {value} is not a multiple of K={k}"
                )));
            }
            cfg.batch.p = value as usize / k;
            cfg.batch.size = Some(value as usize);
        }
    }
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("{} = {value}: {e}", param.name())))?;
    Ok(cfg)
}

/// Rank-1 of one sweep point. λ runs the whole protocol and scores the last
/// task on its own head; batch size trains and scores the first task only.
fn sweep_run(
    cfg: &ExperimentConfig,
    param: SweepParam,
    tasks: &[TaskData],
    kernel: Option<&NativeKernel>,
) -> Result<f64> {
    match param {
        SweepParam::Lambda => {
            let (rows, _) = incremental_rows(cfg, tasks, kernel, true)?;
            rows.iter()
                .rev()
                .find(|r| !r.reeval)
                .map(|r| r.rank1)
                .ok_or_else(|| CliError::Usage("protocol produced no rows".into()))
        }
        SweepParam::BatchSize => {
            let mut model = fresh_model(cfg, tasks)?;
            let mut log = RunLog::with_files(&cfg.log_dir())?;
            let plan = PhasePlan::standard(1, tasks[0].spec.clone(), cfg.epochs);
            train_phase(&mut model, &plan, &tasks[0], &cfg.train_config(), &mut log, None)?;
            let report = evaluate(&mut model, &tasks[0], 0, &cfg.eval, kernel)?;
            let mut writer = ResultsWriter::create(&cfg.output_dir, "results")?;
            writer.push(ResultRow::new(1, &tasks[0].spec.name, false, &report))?;
            writer.finish()?;
            Ok(report.rank1)
        }
    }
}

pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("'{s}' is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    Ok(values)
}

pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], parallel: bool) -> Result<Vec<PathBuf>> {
    if values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    if param == SweepParam::Lambda {
        check_incremental(cfg)?;
    }
    let root = cfg.output_dir.join(format!("sweep_{}", param.name()));
    let points = values
        .iter()
        .map(|&v| sweep_point(cfg, param, v, &root).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    let tasks = load_tasks(cfg)?;
    let kernel = cfg.native_kernel();

    let one = |(value, point): &(f64, ExperimentConfig)| {
        log::info!("sweep {} = {value}", param.name());
        let result = sweep_run(point, param, &tasks, kernel.as_ref());
        if let Err(e) = &result {
            log::error!("sweep {} = {value} failed: {e}", param.name());
        }
        SweepRow {
            value: *value,
            rank1: result.as_ref().ok().copied(),
            best: false,
            error: result.err().map(|e| e.to_string()),
            output_dir: point.output_dir.clone(),
        }
    };
    let mut rows: Vec<SweepRow> = if parallel {
        points.par_iter().map(one).collect()
    } else {
        points.iter().map(one).collect()
    };
    finalize_sweep(&mut rows);

    println!("{:>12} {:>8}", param.name(), "rank1");
    for r in &rows {
        let rank1 = r.rank1.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}"));
        println!("{:>12} {rank1:>8}{}", r.value, if r.best { "  *" } else { "" });
    }
    let outputs = write_sweep(&cfg.output_dir, param.name(), &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(CliError::SweepFailed {
            failed,
            total: rows.len(),
        });
    }
    Ok(outputs)
}
