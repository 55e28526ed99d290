//! Shared backbone with one task pipeline ("head") per task.

mod backbone;
mod head;

pub use backbone::{Backbone, BackboneArch, BackboneConfig};
pub use head::{Head, HeadConfig, HeadOutput, HeadTap};

use std::collections::BTreeSet;

use ndarray::{Array2, Array4};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabelMap;
use crate::error::{ReidError, Result};
use crate::nn::{Module, Pass, TensorKind, TensorMut, TensorRef};

/// The task a head was trained on, with its class-index mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBinding {
    pub name: String,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadSlot {
    pub(crate) head: Head,
    pub(crate) frozen: bool,
    pub(crate) trained: bool,
    pub(crate) task: Option<TaskBinding>,
}

/// Names of the parameters an optimizer may update.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamSet {
    names: BTreeSet<String>,
}

impl ParamSet {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

impl FromIterator<String> for ParamSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        Self {
            names: iter.into_iter().collect(),
        }
    }
}

pub(crate) fn head_prefix(index: usize) -> String {
    format!("heads.{index}")
}

#[derive(Debug, Clone)]
pub struct MultiHeadModel {
    backbone: Backbone,
    heads: Vec<HeadSlot>,
    phase: usize,
}

impl MultiHeadModel {
    pub fn new(backbone: BackboneConfig, heads: Vec<HeadConfig>, seed: u64) -> Result<Self> {
        let mut rng = StdRng::seed_from_u64(seed);
        let backbone = Backbone::new(backbone, &mut rng)?;
        let heads = heads
            .into_iter()
            .map(|cfg| {
                if cfg.in_channels != backbone.output_channels() {
                    return Err(ReidError::ShapeMismatch(format!(
                        "head expects {} input channels, backbone produces {}",
                        cfg.in_channels,
                        backbone.output_channels()
                    )));
                }
                Head::new(cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_parts(backbone, heads))
    }

    pub(crate) fn from_parts(backbone: Backbone, heads: Vec<Head>) -> Self {
        Self {
            backbone,
            heads: heads
                .into_iter()
                .map(|head| HeadSlot {
                    head,
                    frozen: false,
                    trained: false,
                    task: None,
                })
                .collect(),
            phase: 0,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    fn slot(&self, index: usize) -> Result<&HeadSlot> {
        self.heads.get(index).ok_or(ReidError::UnknownHead {
            index,
            count: self.heads.len(),
        })
    }

    fn slot_mut(&mut self, index: usize) -> Result<&mut HeadSlot> {
        let count = self.heads.len();
        self.heads.get_mut(index).ok_or(ReidError::UnknownHead { index, count })
    }

    pub fn head(&self, index: usize) -> Result<&Head> {
        Ok(&self.slot(index)?.head)
    }

    pub fn head_mut(&mut self, index: usize) -> Result<&mut Head> {
        Ok(&mut self.slot_mut(index)?.head)
    }

    pub fn forward_backbone(&mut self, images: &Array4<f64>, pass: Pass) -> Result<Array4<f64>> {
        self.backbone.forward(images, pass)
    }

    /// Run one head. Frozen heads always use their running statistics.
    pub fn forward_head(&mut self, index: usize, features: &Array4<f64>, pass: Pass) -> Result<HeadOutput> {
        let slot = self.slot_mut(index)?;
        let pass = if slot.frozen {
            Pass { train: false, ..pass }
        } else {
            pass
        };
        slot.head.forward(features, pass)
    }

    /// Gradient with respect to the head's input features. Parameter
    /// gradients are accumulated only for heads that are not frozen.
    pub fn backward_head(
        &mut self,
        index: usize,
        dlogits: Option<&Array2<f64>>,
        dtap1: Option<&Array4<f64>>,
        dtap2: Option<&Array4<f64>>,
    ) -> Result<Array4<f64>> {
        let slot = self.slot_mut(index)?;
        let accumulate = !slot.frozen;
        Ok(slot.head.backward(dlogits, dtap1, dtap2, accumulate))
    }

    pub fn backward_backbone(&mut self, dfeatures: &Array4<f64>) -> Array4<f64> {
        self.backbone.backward(dfeatures, true)
    }

    pub fn set_frozen(&mut self, index: usize, frozen: bool) -> Result<()> {
        self.slot_mut(index)?.frozen = frozen;
        Ok(())
    }

    pub fn is_frozen(&self, index: usize) -> Result<bool> {
        Ok(self.slot(index)?.frozen)
    }

    pub fn mark_trained(&mut self, index: usize) -> Result<()> {
        self.slot_mut(index)?.trained = true;
        Ok(())
    }

    pub fn is_trained(&self, index: usize) -> Result<bool> {
        Ok(self.slot(index)?.trained)
    }

    pub fn bind_task(&mut self, index: usize, binding: TaskBinding) -> Result<()> {
        self.slot_mut(index)?.task = Some(binding);
        Ok(())
    }

    pub fn task(&self, index: usize) -> Result<Option<&TaskBinding>> {
        Ok(self.slot(index)?.task.as_ref())
    }

    /// Number of completed training phases.
    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn set_phase(&mut self, phase: usize) {
        self.phase = phase;
    }

    /// Parameters updated in 1-based training phase `phase`: the backbone plus
    /// head `phase - 1`, unless that head is frozen.
    pub fn trainable_parameters(&self, phase: usize) -> Result<ParamSet> {
        let active = phase.checked_sub(1).ok_or(ReidError::UnknownHead {
            index: usize::MAX,
            count: self.heads.len(),
        })?;
        let slot = self.slot(active)?;
        let mut names = Vec::new();
        self.backbone.visit("backbone", &mut |name, t| {
            if t.kind == TensorKind::Param {
                names.push(name.to_string());
            }
        });
        if !slot.frozen {
            slot.head.visit(&head_prefix(active), &mut |name, t| {
                if t.kind == TensorKind::Param {
                    names.push(name.to_string());
                }
            });
        }
        Ok(names.into_iter().collect())
    }
}

impl Module for MultiHeadModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.backbone.visit(&crate::nn::join(prefix, "backbone"), f);
        for (i, slot) in self.heads.iter().enumerate() {
            slot.head.visit(&crate::nn::join(prefix, &head_prefix(i)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.backbone.visit_mut(&crate::nn::join(prefix, "backbone"), f);
        for (i, slot) in self.heads.iter_mut().enumerate() {
            slot.head.visit_mut(&crate::nn::join(prefix, &head_prefix(i)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_grad;

    fn toy(heads: usize) -> MultiHeadModel {
        let cfgs = (0..heads).map(|_| HeadConfig::new(16, 5)).collect();
        MultiHeadModel::new(BackboneConfig::tiny(), cfgs, 7).unwrap()
    }

    #[test]
    fn head_shapes_on_toy_features() {
        let mut m = toy(1);
        let feats = Array4::from_elem((1, 16, 4, 2), 0.3);
        let out = m.forward_head(0, &feats, Pass::INFER).unwrap();
        assert_eq!(out.logits.dim(), (1, 5));
        assert_eq!(out.tap1.dim(), (1, 8, 4, 2));
        assert_eq!(out.tap2.dim(), (1, 8, 4, 2));
    }

    #[test]
    fn head_errors() {
        let mut m = toy(2);
        let feats = Array4::zeros((1, 16, 4, 2));
        assert!(matches!(
            m.forward_head(7, &feats, Pass::INFER),
            Err(ReidError::UnknownHead { index: 7, count: 2 })
        ));
        assert!(matches!(m.set_frozen(7, true), Err(ReidError::UnknownHead { .. })));
        let odd = Array4::zeros((1, 15, 4, 2));
        assert!(matches!(
            m.forward_head(0, &odd, Pass::INFER),
            Err(ReidError::OddChannels(15))
        ));
        assert!(HeadConfig::new(16, 1).validate().is_err());
    }

    #[test]
    fn zero_features_give_affine_of_normalization_constants() {
        let mut m = toy(1);
        let head = m.head_mut(0).unwrap();
        let [bn1, bn2] = head.bn_mut();
        // Hand-set normalization constants so the shift path is exercised.
        for (i, v) in bn1.beta.value.iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.3;
        }
        for (i, v) in bn1.running_mean.iter_mut().enumerate() {
            *v = 0.05 * i as f64;
        }
        for (i, v) in bn2.beta.value.iter_mut().enumerate() {
            *v = 0.2 - 0.07 * i as f64;
        }
        for (i, v) in bn2.running_var.iter_mut().enumerate() {
            *v = 1.0 + 0.5 * i as f64;
        }
        let bn1 = bn1.clone();
        let bn2 = bn2.clone();
        let fc = head.classifier_mut();
        for (i, b) in fc.bias.value.iter_mut().enumerate() {
            *b = i as f64 * 0.25 - 0.5;
        }
        let fc = fc.clone();
        let slope = 0.01;
        let lrelu = |v: f64| if v > 0.0 { v } else { slope * v };

        // block1: conv(0) = 0 -> bn -> lrelu, constant over space
        let a1: Vec<f64> = (0..8)
            .map(|c| {
                let n = (0.0 - bn1.running_mean[c]) / (bn1.running_var[c] + bn1.eps).sqrt();
                lrelu(bn1.gamma.value[c] * n + bn1.beta.value[c])
            })
            .collect();
        // block2 input is constant per channel; with zero padding the border
        // cells see fewer taps, so evaluate the conv explicitly.
        let w2 = &head_conv2_weight(&m);
        let (h, w) = (4usize, 2usize);
        let mut pooled = [0.0; 8];
        for co in 0..8 {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for ci in 0..8 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = x as isize + kx as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += w2[[co, ci, ky, kx]] * a1[ci];
                                }
                            }
                        }
                    }
                    let n = (s - bn2.running_mean[co]) / (bn2.running_var[co] + bn2.eps).sqrt();
                    acc += lrelu(bn2.gamma.value[co] * n + bn2.beta.value[co]);
                }
            }
            pooled[co] = acc / (h * w) as f64;
        }
        let expected: Vec<f64> = (0..5)
            .map(|k| fc.bias.value[k] + (0..8).map(|c| fc.weight.value[[k, c]] * pooled[c]).sum::<f64>())
            .collect();

        let out = m.forward_head(0, &Array4::zeros((1, 16, h, w)), Pass::INFER).unwrap();
        for (k, want) in expected.iter().enumerate() {
            assert!((out.logits[[0, k]] - want).abs() < 1e-12);
        }

        // With default constants every stage maps zero to zero: logits == bias.
        let mut fresh = toy(1);
        let out = fresh
            .forward_head(0, &Array4::zeros((2, 16, h, w)), Pass::INFER)
            .unwrap();
        let bias = fresh.head(0).unwrap().clone().classifier_mut().bias.value.clone();
        for r in out.logits.rows() {
            assert_eq!(r, bias);
        }
    }

    fn head_conv2_weight(m: &MultiHeadModel) -> ndarray::Array4<f64> {
        let mut w = None;
        m.head(0).unwrap().visit("", &mut |name, t| {
            if name == "block2.conv.weight" {
                w = Some(t.value.to_owned().into_dimensionality().unwrap());
            }
        });
        w.unwrap()
    }

    #[test]
    fn trainable_sets_per_phase() {
        let mut m = toy(3);
        let p1 = m.trainable_parameters(1).unwrap();
        assert!(p1.iter().any(|n| n.starts_with("backbone.")));
        assert!(p1.iter().any(|n| n.starts_with("heads.0.")));
        assert!(!p1
            .iter()
            .any(|n| n.starts_with("heads.1.") || n.starts_with("heads.2.")));
        assert!(!p1.iter().any(|n| n.ends_with("running_mean")));

        m.set_frozen(0, true).unwrap();
        let p2 = m.trainable_parameters(2).unwrap();
        assert!(p2.iter().any(|n| n.starts_with("heads.1.")));
        assert!(!p2.iter().any(|n| n.starts_with("heads.0.")));

        let p3 = m.trainable_parameters(3).unwrap();
        assert!(p3.iter().any(|n| n.starts_with("heads.2.")));
        assert!(!p3.iter().any(|n| n.starts_with("heads.1.")));

        m.set_frozen(2, true).unwrap();
        let p3 = m.trainable_parameters(3).unwrap();
        assert!(p3.iter().all(|n| n.starts_with("backbone.")));
        assert!(m.trainable_parameters(4).is_err());
    }

    #[test]
    fn frozen_head_gets_no_param_grads_but_passes_input_grads() {
        let mut m = toy(2);
        m.set_frozen(0, true).unwrap();
        zero_grad(&mut m);
        let feats = Array4::from_shape_fn((2, 16, 4, 2), |(b, c, h, w)| ((b + c + h + w) as f64).sin());
        let out = m.forward_head(0, &feats, Pass::TRAIN).unwrap();
        let dl = Array2::ones(out.logits.raw_dim());
        let dx = m.backward_head(0, Some(&dl), None, Some(&out.tap2)).unwrap();
        assert!(dx.iter().any(|&v| v != 0.0));
        let mut all_zero = true;
        m.head(0).unwrap().visit("", &mut |_, t| {
            if let Some(g) = t.grad {
                all_zero &= g.iter().all(|&v| v == 0.0);
            }
        });
        assert!(all_zero);
    }
}
