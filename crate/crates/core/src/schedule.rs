//! Triangular cyclical learning rate and the optimizers that consume it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::model::ParamSet;
use crate::nn::{Module, TensorKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClrConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Iterations per half cycle.
    pub step_size: usize,
}

impl ClrConfig {
    pub fn new(base_lr: f64, max_lr: f64, step_size: usize) -> Result<Self> {
        let cfg = Self {
            base_lr,
            max_lr,
            step_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr < self.max_lr && self.max_lr.is_finite()) {
            return Err(ReidError::Config(format!(
                "CLR needs 0 < base_lr < max_lr, got {} and {}",
                self.base_lr, self.max_lr
            )));
        }
        if self.step_size == 0 {
            return Err(ReidError::Config("CLR step_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Triangular cyclical learning rate at iteration `it`.
///
/// `cycle = floor(1 + it / 2s)`, `x = |it/s − 2·cycle + 1|`,
/// `lr = base + (max − base)·max(0, 1 − x)`. The distance to the peak is kept
/// in integers so the schedule is exactly periodic and symmetric.
pub fn clr_lr(it: usize, cfg: &ClrConfig) -> f64 {
    let s = cfg.step_size as u64;
    let it = it as u64;
    let cycle = 1 + it / (2 * s);
    let peak = (2 * cycle - 1) * s;
    let dist = it.abs_diff(peak);
    if dist == 0 {
        return cfg.max_lr;
    }
    if dist >= s {
        return cfg.base_lr;
    }
    let t = (s - dist) as f64 / s as f64;
    (cfg.base_lr + (cfg.max_lr - cfg.base_lr) * t).clamp(cfg.base_lr, cfg.max_lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdClr,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_clr" => Ok(OptimizerKind::SgdClr),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(ReidError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdClr => "sgd_clr",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "adam_defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "adam_defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "adam_defaults::eps")]
    pub eps: f64,
    #[serde(default = "adam_defaults::weight_decay")]
    pub weight_decay: f64,
}

mod adam_defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: adam_defaults::beta1(),
            beta2: adam_defaults::beta2(),
            eps: adam_defaults::eps(),
            weight_decay: adam_defaults::weight_decay(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub clr: ClrConfig,
    pub momentum: f64,
    pub adam: AdamConfig,
}

impl OptimizerConfig {
    pub fn sgd_clr(clr: ClrConfig) -> Self {
        Self {
            kind: OptimizerKind::SgdClr,
            clr,
            momentum: 0.9,
            adam: AdamConfig::default(),
        }
    }
}

/// Per-parameter optimizer slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub first: ArrayD<f64>,
    pub second: Option<ArrayD<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    params: ParamSet,
    state: BTreeMap<String, SlotState>,
    iteration: usize,
    lr_scales: Vec<(String, f64)>,
}

/// Build an optimizer over `params`.
pub fn make_optimizer(params: ParamSet, cfg: &OptimizerConfig) -> Result<Optimizer> {
    if params.is_empty() {
        return Err(ReidError::EmptyParameterSet);
    }
    if cfg.kind == OptimizerKind::SgdClr {
        cfg.clr.validate()?;
    }
    Ok(Optimizer {
        cfg: *cfg,
        params,
        state: BTreeMap::new(),
        iteration: 0,
        lr_scales: Vec::new(),
    })
}

impl Optimizer {
    pub fn kind(&self) -> OptimizerKind {
        self.cfg.kind
    }

    /// Multiply the learning rate of parameters under `prefix` by `scale`.
    /// The first matching prefix wins.
    pub fn with_lr_scale(mut self, prefix: impl Into<String>, scale: f64) -> Self {
        self.lr_scales.push((prefix.into(), scale));
        self
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn set_iteration(&mut self, it: usize) {
        self.iteration = it;
    }

    /// Learning rate the next `step` will use.
    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.iteration)
    }

    pub fn lr_at(&self, it: usize) -> f64 {
        match self.cfg.kind {
            OptimizerKind::SgdClr => clr_lr(it, &self.cfg.clr),
            OptimizerKind::Adam => self.cfg.adam.lr,
        }
    }

    pub fn state(&self) -> &BTreeMap<String, SlotState> {
        &self.state
    }

    pub fn restore_state(&mut self, state: BTreeMap<String, SlotState>, iteration: usize) {
        self.state = state;
        self.iteration = iteration;
    }

    /// Apply one update to every parameter in the set; returns the LR used.
    pub fn step(&mut self, model: &mut dyn Module) -> f64 {
        let lr = self.current_lr();
        let cfg = self.cfg;
        let t = (self.iteration + 1) as i32;
        let params = &self.params;
        let state = &mut self.state;
        let scales = &self.lr_scales;
        model.visit_mut("", &mut |name, tensor| {
            if tensor.kind != TensorKind::Param || !params.contains(name) {
                return;
            }
            let lr = scales
                .iter()
                .find(|(prefix, _)| name.starts_with(prefix.as_str()))
                .map_or(lr, |(_, s)| lr * s);
            let mut value = tensor.value;
            let grad = tensor.grad.expect("parameters carry gradients");
            let slot = state.entry(name.to_string()).or_insert_with(|| SlotState {
                first: ArrayD::zeros(value.raw_dim()),
                second: (cfg.kind == OptimizerKind::Adam).then(|| ArrayD::zeros(value.raw_dim())),
            });
            match cfg.kind {
                OptimizerKind::SgdClr => {
                    let mom = cfg.momentum;
                    ndarray::Zip::from(&mut value)
                        .and(&mut slot.first)
                        .and(&grad)
                        .for_each(|w, v, &g| {
                            *v = mom * *v + g;
                            *w -= lr * *v;
                        });
                }
                OptimizerKind::Adam => {
                    let a = cfg.adam;
                    let bc1 = 1.0 - a.beta1.powi(t);
                    let bc2 = 1.0 - a.beta2.powi(t);
                    let second = slot.second.get_or_insert_with(|| ArrayD::zeros(value.raw_dim()));
                    ndarray::Zip::from(&mut value)
                        .and(&mut slot.first)
                        .and(second)
                        .and(&grad)
                        .for_each(|w, m, v, &g| {
                            let g = g + a.weight_decay * *w;
                            *m = a.beta1 * *m + (1.0 - a.beta1) * g;
                            *v = a.beta2 * *v + (1.0 - a.beta2) * g * g;
                            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + a.eps);
                        });
                }
            }
        });
        self.iteration += 1;
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, HeadConfig, MultiHeadModel};
    use proptest::prelude::*;

    fn clr(base: f64, max: f64, step: usize) -> ClrConfig {
        ClrConfig::new(base, max, step).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let c = clr(0.001, 0.006, 4);
        assert_eq!(clr_lr(0, &c), 0.001);
        assert_eq!(clr_lr(4, &c), 0.006);
        assert!((clr_lr(2, &c) - 0.0035).abs() < 1e-15);
        assert_eq!(clr_lr(8, &c), 0.001);
    }

    #[test]
    fn sgd_trace_is_a_symmetric_triangle() {
        let model = MultiHeadModel::new(BackboneConfig::tiny(), vec![HeadConfig::new(16, 3)], 0).unwrap();
        let c = clr(0.01, 0.05, 5);
        let mut opt = make_optimizer(model.trainable_parameters(1).unwrap(), &OptimizerConfig::sgd_clr(c)).unwrap();
        let mut model = model;
        let trace: Vec<f64> = (0..=10).map(|_| opt.step(&mut model)).collect();
        let rev: Vec<f64> = trace.iter().rev().copied().collect();
        assert_eq!(trace, rev);
        assert_eq!(trace[5], 0.05);
    }

    #[test]
    fn adam_trace_is_constant() {
        let model = MultiHeadModel::new(BackboneConfig::tiny(), vec![HeadConfig::new(16, 3)], 0).unwrap();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..OptimizerConfig::sgd_clr(clr(0.001, 0.006, 4))
        };
        let mut opt = make_optimizer(model.trainable_parameters(1).unwrap(), &cfg).unwrap();
        let mut model = model;
        assert!((0..6).map(|_| opt.step(&mut model)).all(|lr| lr == 3e-4));
    }

    #[test]
    fn construction_errors() {
        let cfg = OptimizerConfig::sgd_clr(clr(0.001, 0.006, 4));
        assert!(matches!(
            make_optimizer(ParamSet::default(), &cfg),
            Err(ReidError::EmptyParameterSet)
        ));
        assert!(matches!(
            "rmsprop".parse::<OptimizerKind>(),
            Err(ReidError::UnknownKind(_))
        ));
        assert!(ClrConfig::new(0.01, 0.001, 4).is_err());
        assert!(ClrConfig::new(0.001, 0.01, 0).is_err());
    }

    #[test]
    fn params_outside_the_set_are_untouched() {
        let mut model = MultiHeadModel::new(
            BackboneConfig::tiny(),
            vec![HeadConfig::new(16, 3), HeadConfig::new(16, 3)],
            0,
        )
        .unwrap();
        model.visit_mut("", &mut |_, t| {
            if let Some(mut g) = t.grad {
                g.fill(1.0);
            }
        });
        let before = model.head(1).unwrap().clone();
        let mut opt = make_optimizer(
            model.trainable_parameters(1).unwrap(),
            &OptimizerConfig::sgd_clr(clr(0.001, 0.006, 4)),
        )
        .unwrap();
        opt.step(&mut model);
        let bits = |m: &dyn Module| {
            let mut v = Vec::new();
            m.visit("", &mut |_, t| v.extend(t.value.iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(bits(&before), bits(model.head(1).unwrap()));
    }

    proptest! {
        #[test]
        fn periodic_bounded_symmetric(base in 1e-5f64..1e-1, ratio in 1.01f64..20.0, step in 1usize..50, it in 0usize..10_000) {
            let c = clr(base, base * ratio, step);
            let lr = clr_lr(it, &c);
            prop_assert_eq!(lr.to_bits(), clr_lr(it + 2 * step, &c).to_bits());
            prop_assert!(lr >= c.base_lr && lr <= c.max_lr);
            let k = it % (step + 1);
            prop_assert_eq!(clr_lr(step - k, &c).to_bits(), clr_lr(step + k, &c).to_bits());
        }
    }
}
