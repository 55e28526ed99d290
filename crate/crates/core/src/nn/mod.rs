//! Minimal layer library with explicit forward/backward passes.
//!
//! Every layer caches what it needs during a recording forward pass and
//! consumes the cache in `backward`. Parameter gradients are accumulated
//! into [`Param::grad`] only when the caller asks for it, which is how frozen
//! sub-networks pass gradients through to their inputs while their own
//! parameters stay untouched.

mod conv;
mod layers;
mod norm;

pub use conv::Conv2d;
pub use layers::{AvgPool2d, GlobalAvgPool, LeakyRelu, Linear, MaxPool2d};
pub use norm::BatchNorm2d;

use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// How a forward pass should behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    /// Normalization layers use batch statistics and update running stats.
    pub train: bool,
    /// Keep activations so that `backward` can be called afterwards.
    pub record: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        train: true,
        record: true,
    };
    /// Inference-mode statistics, but still differentiable with respect to the input.
    pub const FROZEN: Pass = Pass {
        train: false,
        record: true,
    };
    pub const INFER: Pass = Pass {
        train: false,
        record: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

pub struct TensorRef<'a> {
    pub kind: TensorKind,
    pub value: ArrayViewD<'a, f64>,
    pub grad: Option<ArrayViewD<'a, f64>>,
}

pub struct TensorMut<'a> {
    pub kind: TensorKind,
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: Option<ArrayViewMutD<'a, f64>>,
}

/// Named traversal over parameters and buffers.
///
/// Names are dot-joined paths (`heads.0.block1.conv.weight`) and are stable,
/// so they double as checkpoint keys and optimizer-state keys.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub(crate) fn as_ref(&self) -> TensorRef<'_> {
        TensorRef {
            kind: TensorKind::Param,
            value: self.value.view().into_dyn(),
            grad: Some(self.grad.view().into_dyn()),
        }
    }

    pub(crate) fn as_mut(&mut self) -> TensorMut<'_> {
        TensorMut {
            kind: TensorKind::Param,
            value: self.value.view_mut().into_dyn(),
            grad: Some(self.grad.view_mut().into_dyn()),
        }
    }
}

pub(crate) fn buffer_ref<D: Dimension>(a: &Array<f64, D>) -> TensorRef<'_> {
    TensorRef {
        kind: TensorKind::Buffer,
        value: a.view().into_dyn(),
        grad: None,
    }
}

pub(crate) fn buffer_mut<D: Dimension>(a: &mut Array<f64, D>) -> TensorMut<'_> {
    TensorMut {
        kind: TensorKind::Buffer,
        value: a.view_mut().into_dyn(),
        grad: None,
    }
}

/// Kaiming-normal initialisation for a fan of `fan` inputs.
pub(crate) fn kaiming<D, Sh, R>(shape: Sh, fan: usize, rng: &mut R) -> Array<f64, D>
where
    D: Dimension,
    Sh: ndarray::ShapeBuilder<Dim = D>,
    R: Rng + ?Sized,
{
    let std = (2.0 / fan.max(1) as f64).sqrt();
    normal(shape, std, rng)
}

pub(crate) fn normal<D, Sh, R>(shape: Sh, std: f64, rng: &mut R) -> Array<f64, D>
where
    D: Dimension,
    Sh: ndarray::ShapeBuilder<Dim = D>,
    R: Rng + ?Sized,
{
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut a = Array::zeros(shape);
    a.mapv_inplace(|_: f64| dist.sample(rng));
    a
}

/// Zero all parameter gradients below `module`.
pub fn zero_grad(module: &mut dyn Module) {
    module.visit_mut("", &mut |_, t| {
        if let Some(mut g) = t.grad {
            g.fill(0.0);
        }
    });
}

/// Total element count of all parameters (buffers excluded).
pub fn parameter_count(module: &dyn Module) -> usize {
    let mut n = 0;
    module.visit("", &mut |_, t| {
        if t.kind == TensorKind::Param {
            n += t.value.len();
        }
    });
    n
}
