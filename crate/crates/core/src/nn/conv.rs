use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;

use super::{join, kaiming, Module, Param, Pass, TensorMut, TensorRef};

/// 2-D convolution over NCHW tensors, lowered to a matrix product via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param<ndarray::Ix4>,
    pub bias: Option<Param<ndarray::Ix1>>,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_out = out_channels * kernel * kernel;
        let weight = kaiming((out_channels, in_channels, kernel, kernel), fan_out, rng);
        Self {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Array1::zeros(out_channels))),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.dim().2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let k = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        let cols = im2col(x.view(), k, self.stride, self.padding, ho, wo);
        let cout = self.out_channels();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((cout, c * k * k))
            .expect("contiguous weight");
        let y2 = w2.dot(&cols);
        let mut y = y2
            .into_shape_with_order((cout, b, ho, wo))
            .expect("matmul output is contiguous")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        if let Some(bias) = &self.bias {
            for (mut ch, &bv) in y.axis_iter_mut(Axis(1)).zip(bias.value.iter()) {
                ch += bv;
            }
        }
        self.cache = pass.record.then_some(ConvCache {
            cols,
            in_shape: (b, c, h, w),
        });
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let cache = self.cache.take().expect("Conv2d::backward without a recorded forward");
        let (b, c, h, w) = cache.in_shape;
        let (_, cout, ho, wo) = dy.dim();
        let k = self.kernel();
        let dy2 = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, b * ho * wo))
            .expect("contiguous");
        if accumulate {
            let dw = dy2.dot(&cache.cols.t());
            let dw = dw
                .into_shape_with_order((cout, c, k, k))
                .expect("weight-shaped gradient");
            self.weight.grad += &dw;
            if let Some(bias) = &mut self.bias {
                bias.grad += &dy2.sum_axis(Axis(1));
            }
        }
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((cout, c * k * k))
            .expect("contiguous weight");
        let dcols = w2.t().dot(&dy2);
        col2im(&dcols, (b, c, h, w), k, self.stride, self.padding, ho, wo)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        f(&join(prefix, "weight"), self.weight.as_ref());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b.as_ref());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        f(&join(prefix, "weight"), self.weight.as_mut());
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b.as_mut());
        }
    }
}

fn im2col(x: ArrayView4<f64>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let n = b * ho * wo;
    let mut cols = Array2::<f64>::zeros((c * k * k, n));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cs[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * w..(ih as usize + 1) * w];
                        let dst_row = &mut dst[(bi * ho + oh) * wo..(bi * ho + oh + 1) * wo];
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let (b, c, h, w) = shape;
    let n = b * ho * wo;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array4::<f64>::zeros(shape);
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = &src[(bi * ho + oh) * wo..(bi * ho + oh + 1) * wo];
                        for (ow, &v) in src_row.iter().enumerate() {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                dst[ih as usize * w + iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
