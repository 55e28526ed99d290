use ndarray::{Array1, Array4};

use super::{buffer_mut, buffer_ref, join, Module, Param, Pass, TensorMut, TensorRef};

/// Per-channel batch normalization over NCHW tensors.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param<ndarray::Ix1>,
    pub beta: Param<ndarray::Ix1>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    /// Batch statistics were used, so they depend on x as well.
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Array4<f64>, pass: Pass) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let hw = h * w;
        let count = (b * hw) as f64;
        let mut y = Array4::<f64>::zeros((b, c, h, w));
        let ys = y.as_slice_mut().expect("fresh array");

        if pass.train {
            let mut mean = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count;
                let mut v = 0.0;
                for bi in 0..b {
                    for &xv in &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                        v += (xv - m) * (xv - m);
                    }
                }
                mean[ci] = m;
                var[ci] = v / count;
            }
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let mut xhat = Array4::<f64>::zeros((b, c, h, w));
            let xh = xhat.as_slice_mut().expect("fresh array");
            for bi in 0..b {
                for ci in 0..c {
                    let (g, be, m, is) = (self.gamma.value[ci], self.beta.value[ci], mean[ci], inv_std[ci]);
                    let base = (bi * c + ci) * hw;
                    for i in base..base + hw {
                        let n = (xs[i] - m) * is;
                        xh[i] = n;
                        ys[i] = g * n + be;
                    }
                }
            }
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ci in 0..c {
                self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var[ci] * unbiased;
            }
            self.cache = pass.record.then_some(BnCache {
                xhat,
                inv_std,
                batch_stats: true,
            });
        } else {
            let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let mut xhat = pass.record.then(|| Array4::<f64>::zeros((b, c, h, w)));
            let mut xh = xhat.as_mut().map(|a| a.as_slice_mut().expect("fresh array"));
            for bi in 0..b {
                for ci in 0..c {
                    let (g, be, m, is) = (
                        self.gamma.value[ci],
                        self.beta.value[ci],
                        self.running_mean[ci],
                        inv_std[ci],
                    );
                    let base = (bi * c + ci) * hw;
                    for i in base..base + hw {
                        let n = (xs[i] - m) * is;
                        ys[i] = g * n + be;
                        if let Some(xh) = xh.as_deref_mut() {
                            xh[i] = n;
                        }
                    }
                }
            }
            self.cache = xhat.map(|xhat| BnCache {
                xhat,
                inv_std,
                batch_stats: false,
            });
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f64>, accumulate: bool) -> Array4<f64> {
        let cache = self
            .cache
            .take()
            .expect("BatchNorm2d::backward without a recorded forward");
        let (b, c, h, w) = dy.dim();
        let hw = h * w;
        let count = (b * hw) as f64;
        let dy = dy.as_standard_layout();
        let ds = dy.as_slice().expect("standard layout");
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        let xh = cache.xhat.as_slice().expect("standard layout");
        for ci in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in base..base + hw {
                    sum_dy += ds[i];
                    sum_dy_xhat += ds[i] * xh[i];
                }
            }
            if accumulate {
                self.gamma.grad[ci] += sum_dy_xhat;
                self.beta.grad[ci] += sum_dy;
            }
            let scale = self.gamma.value[ci] * cache.inv_std[ci];
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in base..base + hw {
                    dxs[i] = if cache.batch_stats {
                        scale / count * (count * ds[i] - sum_dy - xh[i] * sum_dy_xhat)
                    } else {
                        scale * ds[i]
                    };
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        f(&join(prefix, "weight"), self.gamma.as_ref());
        f(&join(prefix, "bias"), self.beta.as_ref());
        f(&join(prefix, "running_mean"), buffer_ref(&self.running_mean));
        f(&join(prefix, "running_var"), buffer_ref(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        f(&join(prefix, "weight"), self.gamma.as_mut());
        f(&join(prefix, "bias"), self.beta.as_mut());
        f(&join(prefix, "running_mean"), buffer_mut(&mut self.running_mean));
        f(&join(prefix, "running_var"), buffer_mut(&mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut rng = StdRng::seed_from_u64(1);
        let x: Array4<f64> = super::super::normal((4, 3, 2, 2), 2.0, &mut rng) + 5.0;
        let mut bn = BatchNorm2d::new(3);
        let y = bn.forward(&x, Pass::TRAIN);
        for ci in 0..3 {
            let ch = y.index_axis(ndarray::Axis(1), ci);
            let m = ch.mean().unwrap();
            let v = ch.mapv(|a| (a - m) * (a - m)).mean().unwrap();
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.iter().all(|&m| m > 0.3));
    }

    #[test]
    fn eval_mode_leaves_running_stats() {
        let mut bn = BatchNorm2d::new(2);
        bn.running_mean = Array1::from(vec![1.0, -1.0]);
        let before = bn.running_mean.clone();
        let y = bn.forward(&Array4::zeros((1, 2, 1, 1)), Pass::FROZEN);
        assert_eq!(bn.running_mean, before);
        let expected = -1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[[0, 0, 0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let x: Array4<f64> = super::super::normal((3, 2, 2, 3), 1.0, &mut rng);
        let r: Array4<f64> = super::super::normal((3, 2, 2, 3), 1.0, &mut rng);
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = Array1::from(vec![1.5, -0.7]);
        bn.beta.value = Array1::from(vec![0.2, 0.1]);
        let loss = |bn: &mut BatchNorm2d, x: &Array4<f64>| {
            let mut probe = bn.clone();
            (probe.forward(x, Pass::TRAIN) * &r).sum()
        };
        bn.forward(&x, Pass::TRAIN);
        let dx = bn.backward(&r, true);
        let h = 1e-5;
        for idx in [[0, 0, 0, 0], [2, 1, 1, 2], [1, 0, 1, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
        for ci in 0..2 {
            let orig = bn.gamma.value[ci];
            bn.gamma.value[ci] = orig + h;
            let lp = loss(&mut bn, &x);
            bn.gamma.value[ci] = orig - h;
            let lm = loss(&mut bn, &x);
            bn.gamma.value[ci] = orig;
            assert!(((lp - lm) / (2.0 * h) - bn.gamma.grad[ci]).abs() < 1e-6);
        }
    }
}
