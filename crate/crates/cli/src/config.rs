//! Experiment configuration: JSON checked against the published schema, then
//! deserialized with every default filled in.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use reid_core::datasets::Layout;
use reid_core::eval::{KernelChoice, NativeKernel};
use reid_core::losses::CovLossConfig;
use reid_core::model::BackboneConfig;
use reid_core::schedule::{AdamConfig, OptimizerKind};
use reid_core::trainer::{BatchConfig, ClrSettings, EvalOptions, HeadSettings, TrainConfig, Variants};

use crate::error::{CliError, Result};

pub const SPEC_VERSION: u32 = 1;

/// The schema every config is validated against before any work starts.
pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

fn validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
        jsonschema::validator_for(&schema).expect("bundled schema compiles")
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub layout: Layout,
    pub root: PathBuf,
    /// Checked against the ingested train identities when given.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSection {
    pub p: usize,
    pub k: usize,
    /// Must equal `p * k`; filled in when omitted.
    #[serde(default)]
    pub size: Option<usize>,
    #[serde(default = "yes")]
    pub replacement: bool,
}

fn yes() -> bool {
    true
}

impl Default for BatchSection {
    fn default() -> Self {
        let b = BatchConfig::default();
        Self {
            p: b.p,
            k: b.k,
            size: Some(b.size()),
            replacement: b.replacement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: u32,
    pub tasks: Vec<TaskEntry>,
    pub backbone: BackboneConfig,
    pub head: HeadSettings,
    pub cov: CovLossConfig,
    pub clr: ClrSettings,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub adam: AdamConfig,
    pub batch: BatchSection,
    /// Per phase.
    pub epochs: usize,
    pub iterations_per_epoch: Option<usize>,
    pub eval_every: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub eval: EvalOptions,
    pub kernel: KernelChoice,
    pub cache_images: bool,
    pub variants: Variants,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            spec_version: SPEC_VERSION,
            tasks: Vec::new(),
            backbone: BackboneConfig::tiny(),
            head: HeadSettings::default(),
            cov: t.cov,
            clr: t.clr,
            optimizer: t.optimizer,
            momentum: t.momentum,
            adam: t.adam,
            batch: BatchSection::default(),
            epochs: t.epochs,
            iterations_per_epoch: t.iterations_per_epoch,
            eval_every: t.eval_every,
            seed: t.seed,
            output_dir: PathBuf::from("runs"),
            eval: t.eval,
            kernel: KernelChoice::Reference,
            cache_images: t.cache_images,
            variants: t.variants,
        }
    }
}

/// Schema violations as `pointer: message` lines.
pub fn schema_errors(value: &Value) -> Vec<String> {
    validator()
        .iter_errors(value)
        .map(|e| {
            let at = e.instance_path().to_string();
            format!("{}: {e}", if at.is_empty() { "/" } else { at.as_str() })
        })
        .collect()
}

impl ExperimentConfig {
    /// Parse config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("not valid JSON: {e}")))?;
        let errors = schema_errors(&value);
        if !errors.is_empty() {
            return Err(CliError::Config(format!(
                "schema violations:\n  {}",
                errors.join("\n  ")
            )));
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        if cfg.batch.size.is_none() {
            cfg.batch.size = Some(cfg.batch.p * cfg.batch.k);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.tasks {
            fix(&mut t.root);
        }
        fix(&mut self.output_dir);
        if let Some(w) = &mut self.backbone.weights {
            fix(w);
        }
    }

    /// Checks the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(CliError::Config(format!(
                "spec_version {} is not supported (expected {SPEC_VERSION})",
                self.spec_version
            )));
        }
        if self.tasks.is_empty() {
            return Err(CliError::Config("at least one task is required".into()));
        }
        let names: BTreeSet<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        if names.len() != self.tasks.len() {
            return Err(CliError::Config("task names must be unique".into()));
        }
        if let Some(size) = self.batch.size {
            if size != self.batch.p * self.batch.k {
                return Err(CliError::Config(format!(
                    "batch size {size} != P·K = {}·{}",
                    self.batch.p, self.batch.k
                )));
            }
        }
        self.backbone.validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch: BatchConfig {
                p: self.batch.p,
                k: self.batch.k,
                replacement: self.batch.replacement,
            },
            epochs: self.epochs,
            optimizer: self.optimizer,
            clr: self.clr,
            momentum: self.momentum,
            adam: self.adam,
            cov: self.cov,
            seed: self.seed,
            iterations_per_epoch: self.iterations_per_epoch,
            eval_every: self.eval_every,
            eval: self.eval.clone(),
            checkpoint_dir: Some(self.checkpoint_dir()),
            cache_images: self.cache_images,
            variants: self.variants.clone(),
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.output_dir.join("logs")
    }

    pub fn native_kernel(&self) -> Option<NativeKernel> {
        match self.kernel {
            KernelChoice::Reference => None,
            KernelChoice::Native => Some(NativeKernel::from_env()),
        }
    }

    /// Canonical JSON (all defaults present), used for hashing and round trips.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"spec_version": 1, "tasks": [{"name": "m", "layout": "market", "root": "data/m"}]}"#;

    #[test]
    fn minimal_config_gets_defaults_and_resolved_paths() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.tasks[0].root, Path::new("/base/data/m"));
        assert_eq!(cfg.output_dir, Path::new("/base/runs"));
        assert_eq!(cfg.batch.size, Some(32));
        assert_eq!(cfg.cov.lambda, 1.0);
        assert_eq!(cfg.cov.alpha, 1e-9);
        assert_eq!(cfg.epochs, 100);
    }

    #[test]
    fn canonical_form_round_trips_and_passes_the_schema() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        let text = cfg.canonical_json();
        assert!(schema_errors(&serde_json::from_str(&text).unwrap()).is_empty());
        let again = ExperimentConfig::parse(&text, Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(text, again.canonical_json());
    }

    #[test]
    fn schema_and_semantic_rejections() {
        let bad = [
            r#"{"tasks": [{"name": "m", "layout": "market", "root": "r"}]}"#,
            r#"{"spec_version": 2, "tasks": [{"name": "m", "layout": "market", "root": "r"}]}"#,
            r#"{"spec_version": 1, "tasks": []}"#,
            r#"{"spec_version": 1, "tasks": [{"name": "m", "layout": "viper", "root": "r"}]}"#,
            r#"{"spec_version": 1, "tasks": [{"name": "m", "layout": "market", "root": "r"}], "extra": 1}"#,
            r#"{"spec_version": 1, "tasks": [{"name": "m", "layout": "market", "root": "r"}], "batch": {"p": 8, "k": 4, "size": 30}}"#,
            r#"{"spec_version": 1, "tasks": [{"name": "m", "layout": "market", "root": "r"}], "cov": {"alpha": 0}}"#,
            r#"{"spec_version": 1, "tasks": [{"name": "m", "layout": "market", "root": "r"}, {"name": "m", "layout": "duke", "root": "s"}]}"#,
            r#"{"spec_version": 1, "tasks": [{"name": "m", "layout": "market", "root": "r"}], "clr": {"base_lr": 0.1, "max_lr": 0.01}}"#,
            "not json",
        ];
        for text in bad {
            let err = ExperimentConfig::parse(text, Path::new(".")).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn bundled_schema_accepts_a_full_config() {
        let full = r#"{
            "spec_version": 1,
            "tasks": [
                {"name": "market", "layout": "market", "root": "/d/market", "num_classes": 751},
                {"name": "duke", "layout": "duke", "root": "/d/duke", "num_classes": 702}
            ],
            "backbone": {"arch": "resnet50", "output_channels": 2048, "input_size": [256, 128]},
            "head": {"negative_slope": 0.01, "tap": "block2"},
            "cov": {"lambda": 1, "alpha": 1e-9, "beta": 0, "tap": "block2_both_heads"},
            "clr": {"base_lr": 0.001, "max_lr": 0.006, "step_size": null},
            "optimizer": "sgd_clr",
            "batch": {"p": 16, "k": 4, "size": 64},
            "epochs": 100,
            "seed": 7,
            "output_dir": "/tmp/run",
            "eval": {"topk": [1, 5, 10, 20], "ensemble": "base_plus_head"},
            "kernel": "native"
        }"#;
        let cfg = ExperimentConfig::parse(full, Path::new(".")).unwrap();
        assert_eq!(cfg.kernel, KernelChoice::Native);
        assert_eq!(cfg.train_config().batch.size(), 64);
    }
}
