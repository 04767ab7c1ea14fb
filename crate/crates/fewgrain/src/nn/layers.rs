//! Pooling, batch normalization, and fully-connected layers.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Max pooling with optional zero-free padding (padded cells never win).
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d { kernel, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Forward pass; also returns the flat argmax index per output cell.
    pub fn forward(&self, x: &ArrayView4<f32>) -> (Array4<f32>, Vec<u32>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Array4::<f32>::zeros((n, c, oh, ow));
        let mut idx = vec![0u32; n * c * oh * ow];
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for i in 0..n {
            for ch in 0..c {
                let plane = &xs[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                let base = (i * c + ch) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_at = 0usize;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let at = iy as usize * w + ix as usize;
                                let v = plane[at];
                                if v > best {
                                    best = v;
                                    best_at = at;
                                }
                            }
                        }
                        ys[base + oy * ow + ox] = best;
                        idx[base + oy * ow + ox] = best_at as u32;
                    }
                }
            }
        }
        (y, idx)
    }

    /// Scatter output gradients back to the winning input cells.
    pub fn backward(
        &self,
        gy: &ArrayView4<f32>,
        idx: &[u32],
        in_dims: (usize, usize, usize, usize),
    ) -> Array4<f32> {
        let (n, c, h, w) = in_dims;
        let (_, _, oh, ow) = gy.dim();
        let mut gx = Array4::<f32>::zeros((n, c, h, w));
        let gys = gy.as_standard_layout();
        let gys = gys.as_slice().unwrap();
        let gxs = gx.as_slice_mut().unwrap();
        for plane in 0..n * c {
            let src = &gys[plane * oh * ow..(plane + 1) * oh * ow];
            let ids = &idx[plane * oh * ow..(plane + 1) * oh * ow];
            let dst = &mut gxs[plane * h * w..(plane + 1) * h * w];
            for (&g, &at) in src.iter().zip(ids.iter()) {
                dst[at as usize] += g;
            }
        }
        gx
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
}

/// Saved state from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Array4<f32>,
    pub inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &ArrayView4<f32>) -> (Array4<f32>, BnCache) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f32;
        let mut mean = Array1::<f32>::zeros(c);
        let mut var = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let m = plane.sum() / count;
            let v = plane.iter().map(|&p| (p - m) * (p - m)).sum::<f32>() / count;
            mean[ch] = m;
            var[ch] = v;
        }
        self.running_mean = &self.running_mean * (1.0 - self.momentum) + &mean * self.momentum;
        self.running_var = &self.running_var * (1.0 - self.momentum) + &var * self.momentum;

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut x_hat = x.to_owned();
        let mut y = Array4::<f32>::zeros(x.dim());
        for ch in 0..c {
            let m = mean[ch];
            let is = inv_std[ch];
            let g = self.gamma[ch];
            let b = self.beta[ch];
            let mut xh = x_hat.index_axis_mut(Axis(1), ch);
            xh.mapv_inplace(|v| (v - m) * is);
            y.index_axis_mut(Axis(1), ch).assign(&xh.mapv(|v| g * v + b));
        }
        (y, BnCache { x_hat, inv_std })
    }

    /// Inference-mode forward using the running statistics.
    pub fn forward_eval(&self, x: &ArrayView4<f32>) -> Array4<f32> {
        let (_, c, _, _) = x.dim();
        let mut y = x.to_owned();
        for ch in 0..c {
            let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let m = self.running_mean[ch];
            let g = self.gamma[ch];
            let b = self.beta[ch];
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| g * (v - m) * is + b);
        }
        y
    }

    /// Training-mode backward. Returns `(grad_x, grad_gamma, grad_beta)`.
    pub fn backward(
        &self,
        cache: &BnCache,
        gy: &ArrayView4<f32>,
    ) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
        let (n, c, h, w) = gy.dim();
        let count = (n * h * w) as f32;
        let mut gx = Array4::<f32>::zeros(gy.dim());
        let mut ggamma = Array1::<f32>::zeros(c);
        let mut gbeta = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let gy_c = gy.index_axis(Axis(1), ch);
            let xh_c = cache.x_hat.index_axis(Axis(1), ch);
            let sum_gy = gy_c.sum();
            let sum_gy_xh = gy_c.iter().zip(xh_c.iter()).map(|(&a, &b)| a * b).sum::<f32>();
            ggamma[ch] = sum_gy_xh;
            gbeta[ch] = sum_gy;
            let scale = self.gamma[ch] * cache.inv_std[ch] / count;
            let mut gx_c = gx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut gx_c)
                .and(&gy_c)
                .and(&xh_c)
                .for_each(|g, &dy, &xh| {
                    *g = scale * (count * dy - sum_gy - xh * sum_gy_xh);
                });
        }
        (gx, ggamma, gbeta)
    }
}

/// Fully-connected layer on `(N, in)` activations, weight layout `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Option<Array1<f32>>) -> Self {
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Returns `(grad_x, grad_w, grad_b)`.
    pub fn backward(
        &self,
        x: &ArrayView2<f32>,
        gy: &ArrayView2<f32>,
    ) -> (Array2<f32>, Array2<f32>, Option<Array1<f32>>) {
        let gx = gy.dot(&self.weight);
        let gw = gy.t().dot(x);
        let gb = self.bias.as_ref().map(|_| gy.sum_axis(Axis(0)));
        (gx, gw, gb)
    }
}
