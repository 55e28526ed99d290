use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, GlobalAvgPool, LeakyRelu, Linear, Module, Pass, TensorMut, TensorRef};

/// Which head block's output serves as the head's descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadTap {
    Block1,
    Block2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_slope")]
    pub negative_slope: f64,
    #[serde(default = "default_tap")]
    pub tap: HeadTap,
}

fn default_slope() -> f64 {
    0.01
}

fn default_tap() -> HeadTap {
    HeadTap::Block2
}

impl HeadConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            num_classes,
            negative_slope: default_slope(),
            tap: default_tap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || !self.in_channels.is_multiple_of(2) {
            return Err(ReidError::OddChannels(self.in_channels));
        }
        if self.num_classes < 2 {
            return Err(ReidError::Config(format!(
                "a head needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> usize {
        self.in_channels / 2
    }
}

pub struct HeadOutput {
    pub logits: Array2<f64>,
    /// Block 1 output, `[B, C/2, H, W]`.
    pub tap1: Array4<f64>,
    /// Block 2 output, `[B, C/2, H, W]`.
    pub tap2: Array4<f64>,
}

impl HeadOutput {
    /// Spatially pooled output of the configured tap, `[B, C/2]`.
    pub fn descriptor(&self, tap: HeadTap) -> Array2<f64> {
        match tap {
            HeadTap::Block1 => GlobalAvgPool::forward(&self.tap1),
            HeadTap::Block2 => GlobalAvgPool::forward(&self.tap2),
        }
    }
}

/// Task pipeline: 1×1 conv block (C → C/2), 3×3 conv block (C/2 → C/2),
/// global average pool and a linear classifier.
#[derive(Debug, Clone)]
pub struct Head {
    config: HeadConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act1: LeakyRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    act2: LeakyRelu,
    classifier: Linear,
    spatial: (usize, usize),
}

impl Head {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.in_channels;
        let half = c / 2;
        Ok(Self {
            conv1: Conv2d::new(c, half, 1, 1, 0, false, rng),
            bn1: BatchNorm2d::new(half),
            act1: LeakyRelu::new(config.negative_slope),
            conv2: Conv2d::new(half, half, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(half),
            act2: LeakyRelu::new(config.negative_slope),
            classifier: Linear::new(half, config.num_classes, rng),
            spatial: (0, 0),
            config,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn forward(&mut self, features: &Array4<f64>, pass: Pass) -> Result<HeadOutput> {
        let (_, c, h, w) = features.dim();
        if c % 2 != 0 {
            return Err(ReidError::OddChannels(c));
        }
        if c != self.config.in_channels {
            return Err(ReidError::ShapeMismatch(format!(
                "head expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        self.spatial = (h, w);
        let y = self.conv1.forward(features, pass);
        let y = self.bn1.forward(&y, pass);
        let tap1 = self.act1.forward(&y, pass);
        let y = self.conv2.forward(&tap1, pass);
        let y = self.bn2.forward(&y, pass);
        let tap2 = self.act2.forward(&y, pass);
        let pooled = GlobalAvgPool::forward(&tap2);
        let logits = self.classifier.forward(&pooled, pass);
        Ok(HeadOutput { logits, tap1, tap2 })
    }

    /// Back-propagate gradients arriving at the logits and/or the taps.
    ///
    /// With `accumulate == false` nothing is written into the head's own
    /// parameter gradients; only the input gradient is produced.
    pub fn backward(
        &mut self,
        dlogits: Option<&Array2<f64>>,
        dtap1: Option<&Array4<f64>>,
        dtap2: Option<&Array4<f64>>,
        accumulate: bool,
    ) -> Array4<f64> {
        let (h, w) = self.spatial;
        let batch = dlogits
            .map(|d| d.nrows())
            .or(dtap1.map(|d| d.dim().0))
            .or(dtap2.map(|d| d.dim().0))
            .expect("head backward needs at least one upstream gradient");
        let half = self.config.tap_channels();
        let mut d2 = match dlogits {
            Some(dl) => {
                let dpooled = self.classifier.backward(dl, accumulate);
                GlobalAvgPool::backward(&dpooled, (h, w))
            }
            None => Array4::zeros((batch, half, h, w)),
        };
        if let Some(t) = dtap2 {
            d2 += t;
        }
        let d = self.act2.backward(&d2);
        let d = self.bn2.backward(&d, accumulate);
        let mut d1 = self.conv2.backward(&d, accumulate);
        if let Some(t) = dtap1 {
            d1 += t;
        }
        let d = self.act1.backward(&d1);
        let d = self.bn1.backward(&d, accumulate);
        self.conv1.backward(&d, accumulate)
    }

    #[cfg(test)]
    pub(crate) fn bn_mut(&mut self) -> [&mut BatchNorm2d; 2] {
        [&mut self.bn1, &mut self.bn2]
    }

    #[cfg(test)]
    pub(crate) fn classifier_mut(&mut self) -> &mut Linear {
        &mut self.classifier
    }
}

impl Module for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.conv1.visit(&join(prefix, "block1.conv"), f);
        self.bn1.visit(&join(prefix, "block1.bn"), f);
        self.conv2.visit(&join(prefix, "block2.conv"), f);
        self.bn2.visit(&join(prefix, "block2.bn"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.conv1.visit_mut(&join(prefix, "block1.conv"), f);
        self.bn1.visit_mut(&join(prefix, "block1.bn"), f);
        self.conv2.visit_mut(&join(prefix, "block2.conv"), f);
        self.bn2.visit_mut(&join(prefix, "block2.bn"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
