//! Shared feature extractors: a classification network with its global pool
//! and classifier removed, returning the last spatial feature map.

use std::path::PathBuf;

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::nn::{join, AvgPool2d, BatchNorm2d, Conv2d, LeakyRelu, MaxPool2d, Module, Pass, TensorMut, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneArch {
    /// Three stride-2 conv blocks and a 2×2 average pool (overall stride 16).
    Tiny,
    /// ResNet-50 truncated after `layer4` (overall stride 32, 2048 channels).
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub arch: BackboneArch,
    #[serde(default)]
    pub pretrained: bool,
    /// Tensor archive with backbone weights, required when `pretrained` is set.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    pub output_channels: usize,
    /// Reference input size `(height, width)`.
    pub input_size: (usize, usize),
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            arch: BackboneArch::Tiny,
            pretrained: false,
            weights: None,
            output_channels: 16,
            input_size: (64, 32),
        }
    }

    pub fn resnet50() -> Self {
        Self {
            arch: BackboneArch::Resnet50,
            pretrained: false,
            weights: None,
            output_channels: 2048,
            input_size: (256, 128),
        }
    }

    pub fn stride(&self) -> usize {
        match self.arch {
            BackboneArch::Tiny => 16,
            BackboneArch::Resnet50 => 32,
        }
    }

    /// `(C, H, W)` of the feature map for an input of `(h, w)` pixels.
    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let conv = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
        match self.arch {
            BackboneArch::Tiny => {
                let (mut h, mut w) = (h, w);
                for _ in 0..3 {
                    h = conv(h, 3, 2, 1);
                    w = conv(w, 3, 2, 1);
                }
                (self.output_channels, h / 2, w / 2)
            }
            BackboneArch::Resnet50 => {
                let (mut h, mut w) = (conv(h, 7, 2, 3), conv(w, 7, 2, 3));
                h = conv(h, 3, 2, 1);
                w = conv(w, 3, 2, 1);
                for _ in 0..3 {
                    h = conv(h, 3, 2, 1);
                    w = conv(w, 3, 2, 1);
                }
                (self.output_channels, h, w)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.arch {
            BackboneArch::Resnet50 if self.output_channels != 2048 => {
                return Err(ReidError::Config(format!(
                    "resnet50 produces 2048 channels, config says {}",
                    self.output_channels
                )))
            }
            BackboneArch::Tiny if self.output_channels < 2 || !self.output_channels.is_multiple_of(2) => {
                return Err(ReidError::OddChannels(self.output_channels))
            }
            _ => {}
        }
        let (h, w) = self.input_size;
        if h < self.stride() || w < self.stride() {
            return Err(ReidError::Config(format!(
                "input {h}x{w} is smaller than the backbone stride {}",
                self.stride()
            )));
        }
        if self.pretrained && self.weights.is_none() {
            return Err(ReidError::Config(
                "pretrained backbone requested without a weights file".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Option<LeakyRelu>,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
        slope: Option<f64>,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, s, p, false, rng),
            bn: BatchNorm2d::new(cout),
            act: slope.map(LeakyRelu::new),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let y = self.conv.forward(x, pass);
        let y = self.bn.forward(&y, pass);
        match &mut self.act {
            Some(a) => a.forward(&y, pass),
            None => y,
        }
    }

    fn backward(&mut self, dy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let dy = match &mut self.act {
            Some(a) => a.backward(dy),
            None => dy.clone(),
        };
        let dy = self.bn.backward(&dy, accumulate);
        self.conv.backward(&dy, accumulate)
    }

    /// `conv_name`/`bn_name` keep the torchvision naming of pretrained weights.
    fn visit(&self, prefix: &str, conv_name: &str, bn_name: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.conv.visit(&join(prefix, conv_name), f);
        self.bn.visit(&join(prefix, bn_name), f);
    }

    fn visit_mut(&mut self, prefix: &str, conv_name: &str, bn_name: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.conv.visit_mut(&join(prefix, conv_name), f);
        self.bn.visit_mut(&join(prefix, bn_name), f);
    }
}

#[derive(Debug, Clone)]
pub struct TinyBackbone {
    blocks: [ConvBnAct; 3],
    pool: AvgPool2d,
    pool_in: (usize, usize),
}

impl TinyBackbone {
    fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mid = channels / 2;
        Self {
            blocks: [
                ConvBnAct::new(3, mid, 3, 2, 1, Some(0.01), rng),
                ConvBnAct::new(mid, channels, 3, 2, 1, Some(0.01), rng),
                ConvBnAct::new(channels, channels, 3, 2, 1, Some(0.01), rng),
            ],
            pool: AvgPool2d { size: 2 },
            pool_in: (0, 0),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y, pass);
        }
        self.pool_in = (y.dim().2, y.dim().3);
        self.pool.forward(&y)
    }

    fn backward(&mut self, dy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let mut d = self.pool.backward(dy, self.pool_in);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d, accumulate);
        }
        d
    }
}

impl Module for TinyBackbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(prefix, &format!("conv{}", i + 1), &format!("bn{}", i + 1), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(prefix, &format!("conv{}", i + 1), &format!("bn{}", i + 1), f);
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvBnAct,
    spatial: ConvBnAct,
    expand: ConvBnAct,
    downsample: Option<ConvBnAct>,
    out_act: LeakyRelu,
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(cin: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let cout = width * 4;
        Self {
            reduce: ConvBnAct::new(cin, width, 1, 1, 0, Some(0.0), rng),
            spatial: ConvBnAct::new(width, width, 3, stride, 1, Some(0.0), rng),
            expand: ConvBnAct::new(width, cout, 1, 1, 0, None, rng),
            downsample: (stride != 1 || cin != cout).then(|| ConvBnAct::new(cin, cout, 1, stride, 0, None, rng)),
            out_act: LeakyRelu::new(0.0),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let y = self.reduce.forward(x, pass);
        let y = self.spatial.forward(&y, pass);
        let y = self.expand.forward(&y, pass);
        let shortcut = match &mut self.downsample {
            Some(d) => d.forward(x, pass),
            None => x.clone(),
        };
        self.out_act.forward(&(y + shortcut), pass)
    }

    fn backward(&mut self, dy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let d = self.out_act.backward(dy);
        let dmain = self.expand.backward(&d, accumulate);
        let dmain = self.spatial.backward(&dmain, accumulate);
        let dmain = self.reduce.backward(&dmain, accumulate);
        let dshort = match &mut self.downsample {
            Some(ds) => ds.backward(&d, accumulate),
            None => d,
        };
        dmain + dshort
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.reduce.visit(prefix, "conv1", "bn1", f);
        self.spatial.visit(prefix, "conv2", "bn2", f);
        self.expand.visit(prefix, "conv3", "bn3", f);
        if let Some(d) = &self.downsample {
            d.visit(prefix, "downsample.0", "downsample.1", f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.reduce.visit_mut(prefix, "conv1", "bn1", f);
        self.spatial.visit_mut(prefix, "conv2", "bn2", f);
        self.expand.visit_mut(prefix, "conv3", "bn3", f);
        if let Some(d) = &mut self.downsample {
            d.visit_mut(prefix, "downsample.0", "downsample.1", f);
        }
    }
}

/// ResNet-50 without its average pool and fully connected layer.
#[derive(Debug, Clone)]
pub struct Resnet50 {
    stem: ConvBnAct,
    pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck>>,
}

impl Resnet50 {
    fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut stages = Vec::new();
        let mut cin = 64;
        for (stage, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let mut layer = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                layer.push(Bottleneck::new(cin, width, stride, rng));
                cin = width * 4;
            }
            stages.push(layer);
        }
        Self {
            stem: ConvBnAct::new(3, 64, 7, 2, 3, Some(0.0), rng),
            pool: MaxPool2d::new(3, 2, 1),
            stages,
        }
    }

    fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let y = self.stem.forward(x, pass);
        let mut y = self.pool.forward(&y, pass);
        for layer in &mut self.stages {
            for block in layer {
                y = block.forward(&y, pass);
            }
        }
        y
    }

    fn backward(&mut self, dy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let mut d = dy.clone();
        for layer in self.stages.iter_mut().rev() {
            for block in layer.iter_mut().rev() {
                d = block.backward(&d, accumulate);
            }
        }
        let d = self.pool.backward(&d);
        self.stem.backward(&d, accumulate)
    }
}

impl Module for Resnet50 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.stem.visit(prefix, "conv1", "bn1", f);
        for (s, layer) in self.stages.iter().enumerate() {
            for (b, block) in layer.iter().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{b}", s + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.stem.visit_mut(prefix, "conv1", "bn1", f);
        for (s, layer) in self.stages.iter_mut().enumerate() {
            for (b, block) in layer.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layer{}.{b}", s + 1)), f);
            }
        }
    }
}

#[derive(Debug, Clone)]
enum BackboneNet {
    Tiny(Box<TinyBackbone>),
    Resnet50(Box<Resnet50>),
}

/// Shared base model.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    net: BackboneNet,
}

impl Backbone {
    /// Build with fresh initialisation. Pretrained weights are loaded by the
    /// caller (see [`crate::checkpoint::load_backbone_weights`]).
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let net = match config.arch {
            BackboneArch::Tiny => BackboneNet::Tiny(Box::new(TinyBackbone::new(config.output_channels, rng))),
            BackboneArch::Resnet50 => BackboneNet::Resnet50(Box::new(Resnet50::new(rng))),
        };
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn output_channels(&self) -> usize {
        self.config.output_channels
    }

    pub fn forward(&mut self, images: &Array4<f64>, pass: Pass) -> Result<Array4<f64>> {
        let (b, c, h, w) = images.dim();
        if c != 3 {
            return Err(ReidError::ShapeMismatch(format!(
                "backbone expects 3 input channels, got {c}"
            )));
        }
        if b == 0 {
            return Err(ReidError::ShapeMismatch("empty batch".into()));
        }
        let stride = self.config.stride();
        if h < stride || w < stride {
            return Err(ReidError::ShapeMismatch(format!(
                "input {h}x{w} smaller than backbone stride {stride}"
            )));
        }
        Ok(match &mut self.net {
            BackboneNet::Tiny(n) => n.forward(images, pass),
            BackboneNet::Resnet50(n) => n.forward(images, pass),
        })
    }

    pub fn backward(&mut self, dy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        match &mut self.net {
            BackboneNet::Tiny(n) => n.backward(dy, accumulate),
            BackboneNet::Resnet50(n) => n.backward(dy, accumulate),
        }
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        match &self.net {
            BackboneNet::Tiny(n) => n.visit(prefix, f),
            BackboneNet::Resnet50(n) => n.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        match &mut self.net {
            BackboneNet::Tiny(n) => n.visit_mut(prefix, f),
            BackboneNet::Resnet50(n) => n.visit_mut(prefix, f),
        }
    }
}
