//! 2-D convolution via im2col and sgemm.

use ndarray::{Array1, Array2, Array4, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

use super::GRAD_CHUNKS;

/// A 2-D convolution layer, weight layout `(out, in, kh, kw)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(weight: Array4<f32>, bias: Option<Array1<f32>>, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    /// Forward pass on a `(N, C, H, W)` batch.
    pub fn forward(&self, x: &ArrayView4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (co, ci, kh, kw) = self.weight.dim();
        assert_eq!(c, ci, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();

        let mut y = Array4::<f32>::zeros((n, co, oh, ow));
        let outs: Vec<_> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, self.stride, self.pad);
                let mut yi = w_mat.dot(&cols); // (co, oh*ow)
                if let Some(b) = &self.bias {
                    for (mut row, &bv) in yi.rows_mut().into_iter().zip(b.iter()) {
                        row += bv;
                    }
                }
                yi
            })
            .collect();
        for (i, yi) in outs.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), i)
                .assign(&yi.into_shape_with_order((co, oh, ow)).unwrap());
        }
        y
    }

    /// Backward pass. Returns `(grad_x, grad_w, grad_b)`.
    ///
    /// Per-image work runs in parallel; gradients are reduced over a fixed
    /// chunking of the batch so the summation order is deterministic.
    pub fn backward(
        &self,
        x: &ArrayView4<f32>,
        gy: &ArrayView4<f32>,
    ) -> (Array4<f32>, Array4<f32>, Option<Array1<f32>>) {
        let (n, c, h, w) = x.dim();
        let (co, ci, kh, kw) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(gy.dim(), (n, co, oh, ow), "conv grad shape");
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();

        let chunk = n.div_ceil(GRAD_CHUNKS.min(n).max(1));
        let ranges: Vec<_> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();

        struct Partial {
            range: std::ops::Range<usize>,
            gx: Vec<Array2<f32>>,
            gw: Array2<f32>,
            gb: Array1<f32>,
        }

        let partials: Vec<Partial> = ranges
            .into_par_iter()
            .map(|range| {
                let mut gw = Array2::<f32>::zeros((co, ci * kh * kw));
                let mut gb = Array1::<f32>::zeros(co);
                let mut gx = Vec::with_capacity(range.len());
                for i in range.clone() {
                    let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, self.stride, self.pad);
                    let gyi = gy
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((co, oh * ow))
                        .unwrap();
                    gw = gw + gyi.dot(&cols.t());
                    if self.bias.is_some() {
                        gb = gb + gyi.sum_axis(Axis(1));
                    }
                    let gcols = w_mat.t().dot(&gyi); // (ci*kh*kw, oh*ow)
                    gx.push(gcols);
                }
                Partial { range, gx, gw, gb }
            })
            .collect();

        let mut gx = Array4::<f32>::zeros((n, c, h, w));
        let mut gw = Array2::<f32>::zeros((co, ci * kh * kw));
        let mut gb = Array1::<f32>::zeros(co);
        for p in partials {
            gw += &p.gw;
            gb += &p.gb;
            for (off, gcols) in p.gx.into_iter().enumerate() {
                let i = p.range.start + off;
                col2im(
                    &gcols,
                    &mut gx.index_axis_mut(Axis(0), i),
                    kh,
                    kw,
                    self.stride,
                    self.pad,
                );
            }
        }
        let gw = gw.into_shape_with_order((co, ci, kh, kw)).unwrap();
        let gb = self.bias.as_ref().map(|_| gb);
        (gx, gw, gb)
    }
}

/// Unroll `(C, H, W)` into a `(C*kh*kw, oh*ow)` column matrix.
fn im2col(x: &ArrayView3<f32>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    for ch in 0..c {
        let x_ch = &xs[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let out_row = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back onto the `(C, H, W)` input gradient.
fn col2im(
    cols: &Array2<f32>,
    gx: &mut ndarray::ArrayViewMut3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (c, h, w) = gx.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cs = cols.as_slice().unwrap();
    let gs = gx.as_slice_mut().unwrap();
    for ch in 0..c {
        let g_ch = &mut gs[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let col_row = &cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut g_ch[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow..(oy + 1) * ow];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal, seeded_stream};
    use ndarray::Array4;

    fn random_array4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = seeded_stream(seed, "conv-test");
        Array4::from_shape_fn(dims, |_| normal(&mut rng) as f32)
    }

    /// Direct nested-loop convolution used as the oracle.
    fn conv_naive(x: &Array4<f32>, l: &Conv2d) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (co, _, kh, kw) = l.weight.dim();
        let (oh, ow) = l.out_hw(h, w);
        let mut y = Array4::<f32>::zeros((n, co, oh, ow));
        for i in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = l.bias.as_ref().map_or(0.0, |b| b[o]);
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * l.stride + ky) as isize - l.pad as isize;
                                    let ix = (ox * l.stride + kx) as isize - l.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x[(i, ch, iy as usize, ix as usize)]
                                            * l.weight[(o, ch, ky, kx)];
                                    }
                                }
                            }
                        }
                        y[(i, o, oy, ox)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 3)] {
            let l = Conv2d::new(
                random_array4((4, 3, 3, 3), 1),
                Some(ndarray::array![0.1, -0.2, 0.3, 0.0]),
                stride,
                pad,
            );
            let x = random_array4((2, 3, 7, 6), 2);
            let got = l.forward(&x.view());
            let want = conv_naive(&x, &l);
            let err = (&got - &want).iter().map(|v| v.abs()).fold(0.0f32, f32::max);
            assert!(err <= 1e-4, "stride {stride} pad {pad}: max err {err}");
        }
    }

    #[test]
    fn backward_matches_finite_difference() {
        // Convolution is linear, so central differences are exact up to rounding.
        let l = Conv2d::new(random_array4((2, 2, 3, 3), 3), None, 1, 1);
        let x = random_array4((1, 2, 5, 5), 4);
        let gy = random_array4((1, 2, 5, 5), 5);
        let (gx, gw, _) = l.backward(&x.view(), &gy.view());

        let loss = |x: &Array4<f32>, l: &Conv2d| -> f64 {
            l.forward(&x.view())
                .iter()
                .zip(gy.iter())
                .map(|(&y, &g)| y as f64 * g as f64)
                .sum()
        };
        let h = 1e-2f32;
        for &(i, c, y, xx) in &[(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 4)] {
            let mut xp = x.clone();
            xp[(i, c, y, xx)] += h;
            let mut xm = x.clone();
            xm[(i, c, y, xx)] -= h;
            let fd = (loss(&xp, &l) - loss(&xm, &l)) / (2.0 * h as f64);
            let an = gx[(i, c, y, xx)] as f64;
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1.0), "gx fd={fd} an={an}");
        }
        for &(o, c, ky, kx) in &[(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let mut lp = l.clone();
            lp.weight[(o, c, ky, kx)] += h;
            let mut lm = l.clone();
            lm.weight[(o, c, ky, kx)] -= h;
            let fd = (loss(&x, &lp) - loss(&x, &lm)) / (2.0 * h as f64);
            let an = gw[(o, c, ky, kx)] as f64;
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1.0), "gw fd={fd} an={an}");
        }
    }
}
