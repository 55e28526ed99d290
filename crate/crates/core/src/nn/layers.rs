use ndarray::{Array1, Array2, Array4, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, normal, Module, Param, Pass, TensorMut, TensorRef};

#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub negative_slope: f64,
    cache: Option<Array4<f64>>,
}

impl LeakyRelu {
    pub fn new(negative_slope: f64) -> Self {
        Self {
            negative_slope,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let s = self.negative_slope;
        let y = x.mapv(|v| if v > 0.0 { v } else { s * v });
        self.cache = pass.record.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self
            .cache
            .take()
            .expect("LeakyRelu::backward without a recorded forward");
        let s = self.negative_slope;
        let mut dx = dy.clone();
        dx.zip_mut_with(&x, |d, &v| {
            if v <= 0.0 {
                *d *= s;
            }
        });
        dx
    }
}

/// Non-overlapping average pooling.
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub size: usize,
}

impl AvgPool2d {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let k = self.size;
        let (ho, wo) = (h / k, w / k);
        let norm = (k * k) as f64;
        Array4::from_shape_fn((b, c, ho, wo), |(bi, ci, oh, ow)| {
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..k {
                    s += x[[bi, ci, oh * k + i, ow * k + j]];
                }
            }
            s / norm
        })
    }

    pub fn backward(&self, dy: &Array4<f64>, in_hw: (usize, usize)) -> Array4<f64> {
        let (b, c, ho, wo) = dy.dim();
        let k = self.size;
        let norm = (k * k) as f64;
        let mut dx = Array4::zeros((b, c, in_hw.0, in_hw.1));
        for ((bi, ci, oh, ow), &g) in dy.indexed_iter() {
            for i in 0..k {
                for j in 0..k {
                    dx[[bi, ci, oh * k + i, ow * k + j]] = g / norm;
                }
            }
        }
        debug_assert!(ho * k <= in_hw.0 && wo * k <= in_hw.1);
        dx
    }
}

type Shape4 = (usize, usize, usize, usize);

/// Max pooling with padding; the argmax positions are cached for backward.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Argmax input offsets and the input shape.
    cache: Option<(Vec<usize>, Shape4)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::zeros((b, c, ho, wo));
        let mut arg = vec![0usize; b * c * ho * wo];
        for (o, (yv, a)) in y.iter_mut().zip(arg.iter_mut()).enumerate() {
            let ow = o % wo;
            let oh = (o / wo) % ho;
            let plane = o / (wo * ho);
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = plane * h * w;
            for i in 0..self.kernel {
                let ih = (oh * self.stride + i) as isize - self.padding as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for j in 0..self.kernel {
                    let iw = (ow * self.stride + j) as isize - self.padding as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let idx = plane * h * w + ih as usize * w + iw as usize;
                    if xs[idx] > best {
                        best = xs[idx];
                        best_idx = idx;
                    }
                }
            }
            *yv = best;
            *a = best_idx;
        }
        self.cache = pass.record.then_some((arg, (b, c, h, w)));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (arg, shape) = self
            .cache
            .take()
            .expect("MaxPool2d::backward without a recorded forward");
        let mut dx = Array4::<f64>::zeros(shape);
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (&g, &idx) in dy.iter().zip(arg.iter()) {
            dxs[idx] += g;
        }
        dx
    }
}

/// Spatial mean over H and W: `[B, C, H, W] -> [B, C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward(x: &Array4<f64>) -> Array2<f64> {
        let (_, _, h, w) = x.dim();
        x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
    }

    pub fn backward(dy: &Array2<f64>, hw: (usize, usize)) -> Array4<f64> {
        let (b, c) = dy.dim();
        let n = (hw.0 * hw.1) as f64;
        Array4::from_shape_fn((b, c, hw.0, hw.1), |(bi, ci, _, _)| dy[[bi, ci]] / n)
    }
}

/// Affine map `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param<Ix2>,
    pub bias: Param<Ix1>,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(normal((out_features, in_features), 0.01, rng)),
            bias: Param::new(Array1::zeros(out_features)),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&mut self, x: &Array2<f64>, pass: Pass) -> Array2<f64> {
        let y = x.dot(&self.weight.value.t()) + &self.bias.value;
        self.cache = pass.record.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>, accumulate: bool) -> Array2<f64> {
        let x = self.cache.take().expect("Linear::backward without a recorded forward");
        if accumulate {
            self.weight.grad += &dy.t().dot(&x);
            self.bias.grad += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.value)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        f(&join(prefix, "weight"), self.weight.as_ref());
        f(&join(prefix, "bias"), self.bias.as_ref());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        f(&join(prefix, "weight"), self.weight.as_mut());
        f(&join(prefix, "bias"), self.bias.as_mut());
    }
}
