//! High-order feature integration: degree-r interaction maps built from a
//! rank-1 decomposition (r parallel 1x1 convolutions combined by an
//! elementwise product), aggregated by global average pooling and fused
//! with the first-order path.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::normal;
use crate::types::{Embedding, FeatureMap};

/// Projection bank for one interaction order `r`: `r` weight sets, each
/// mapping the `K` input channels to `D` interaction channels, plus the
/// learned combination vector `a` over those channels.
#[derive(Debug, Clone)]
pub struct OrderBank {
    pub order: usize,
    /// `order` matrices of shape `(D, K)` (the 1x1 convolution weights).
    pub projections: Vec<Array2<f32>>,
    /// Combination weights `a` with `D` entries.
    pub weights: Array1<f64>,
}

impl OrderBank {
    pub fn new(projections: Vec<Array2<f32>>, weights: Array1<f64>) -> Result<Self> {
        let order = projections.len();
        if order == 0 {
            return Err(Error::Config("order bank needs at least one projection".into()));
        }
        let (d, k) = projections[0].dim();
        if d == 0 || k == 0 {
            return Err(Error::Shape("empty projection matrix".into()));
        }
        for p in &projections {
            if p.dim() != (d, k) {
                return Err(Error::Shape(format!(
                    "projection shapes disagree: {:?} vs {:?}",
                    p.dim(),
                    (d, k)
                )));
            }
        }
        if weights.len() != d {
            return Err(Error::Shape(format!(
                "weight vector has {} entries for {d} channels",
                weights.len()
            )));
        }
        Ok(OrderBank {
            order,
            projections,
            weights,
        })
    }

    /// Gaussian init scaled by `1/sqrt(K)` so degree-r products start near
    /// unit scale.
    pub fn init(order: usize, in_channels: usize, rank: usize, rng: &mut impl RngCore) -> Self {
        let scale = 1.0 / (in_channels as f64).sqrt();
        let projections = (0..order)
            .map(|_| {
                Array2::from_shape_fn((rank, in_channels), |_| (normal(rng) * scale) as f32)
            })
            .collect();
        let weights = Array1::from_shape_fn(rank, |_| normal(rng) * (1.0 / (rank as f64).sqrt()));
        OrderBank::new(projections, weights).expect("valid init dims")
    }

    pub fn rank(&self) -> usize {
        self.projections[0].dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.projections[0].dim().1
    }
}

/// All interaction orders `2..=R` of the high-order head. `R = 1` carries
/// no banks and reduces the integrated embedding to plain GAP.
#[derive(Debug, Clone)]
pub struct HighOrderParams {
    pub max_order: usize,
    /// One bank per order, ascending from `r = 2`.
    pub banks: Vec<OrderBank>,
}

impl HighOrderParams {
    /// Initialize banks for orders `2..=max_order` with the given per-order
    /// interaction channel counts (`ranks[i]` is for order `i + 2`).
    pub fn init(
        max_order: usize,
        in_channels: usize,
        ranks: &[usize],
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        if max_order < 1 {
            return Err(Error::Config("order must be >= 1".into()));
        }
        if ranks.len() != max_order - 1 {
            return Err(Error::Config(format!(
                "got {} ranks for orders 2..={max_order}",
                ranks.len()
            )));
        }
        let banks = ranks
            .iter()
            .enumerate()
            .map(|(i, &d)| OrderBank::init(i + 2, in_channels, d, rng))
            .collect();
        Ok(HighOrderParams { max_order, banks })
    }

    /// Identity head: first-order only.
    pub fn first_order() -> Self {
        HighOrderParams {
            max_order: 1,
            banks: Vec::new(),
        }
    }

    /// Output dimension of [`integrate`] for a `K`-channel input.
    pub fn embedding_dim(&self, in_channels: usize) -> usize {
        in_channels + self.banks.iter().map(|b| b.rank()).sum::<usize>()
    }
}

/// Compute the degree-r interaction map: at every spatial location `p`
/// with channel descriptor `x`, `Z[d, p] = prod_s <u_s^d, x>`.
pub fn degree_r_maps(x: &FeatureMap, bank: &OrderBank) -> Result<FeatureMap> {
    let (k, m, n) = x.data.dim();
    if bank.in_channels() != k {
        return Err(Error::Shape(format!(
            "bank expects {} channels, feature map has {k}",
            bank.in_channels()
        )));
    }
    let flat = x
        .data
        .view()
        .into_shape_with_order((k, m * n))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let z = degree_r_flat(&flat, bank)?;
    let data = z
        .into_shape_with_order((bank.rank(), m, n))
        .map_err(|e| Error::Shape(e.to_string()))?;
    FeatureMap::new(data, format!("{}/order{}", x.layer_tag, bank.order))
}

/// Flat-location variant used by both the public op and the batch path.
fn degree_r_flat(x_flat: &ArrayView2<f32>, bank: &OrderBank) -> Result<Array2<f32>> {
    let mut z: Option<Array2<f32>> = None;
    for proj in &bank.projections {
        let h = proj.dot(x_flat); // (D, P)
        z = Some(match z {
            None => h,
            Some(acc) => acc * &h,
        });
    }
    let z = z.expect("bank has projections");
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite interaction values at order {}",
            bank.order
        )));
    }
    Ok(z)
}

/// Integrate a feature map into the fused embedding: GAP of the first-order
/// path concatenated with, for each order `r >= 2`, the combination-weighted
/// GAP of the degree-r interaction map.
pub fn integrate(x: &FeatureMap, params: &HighOrderParams) -> Result<Embedding> {
    let (k, m, n) = x.data.dim();
    let locations = (m * n) as f64;
    let mut values = Vec::with_capacity(params.embedding_dim(k));
    for ch in 0..k {
        let s: f64 = x.data.index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum();
        values.push(s / locations);
    }
    for bank in &params.banks {
        let z = degree_r_maps(x, bank)?;
        for d in 0..bank.rank() {
            let s: f64 = z.data.index_axis(Axis(0), d).iter().map(|&v| v as f64).sum();
            values.push(bank.weights[d] * (s / locations));
        }
    }
    Embedding::new(Array1::from_vec(values))
}

/// The scalar polynomial-predictor response
/// `<w1, sum_p x_p> + sum_r <a^r, sum_p z^r_p>` realized through the same
/// interaction maps as [`integrate`].
pub fn polynomial_response(x: &FeatureMap, params: &HighOrderParams, w1: &[f64]) -> Result<f64> {
    let (k, _, _) = x.data.dim();
    if w1.len() != k {
        return Err(Error::Shape(format!(
            "w1 has {} entries for {k} channels",
            w1.len()
        )));
    }
    let mut total = 0.0f64;
    for ch in 0..k {
        let s: f64 = x.data.index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum();
        total += w1[ch] * s;
    }
    for bank in &params.banks {
        let z = degree_r_maps(x, bank)?;
        for d in 0..bank.rank() {
            let s: f64 = z.data.index_axis(Axis(0), d).iter().map(|&v| v as f64).sum();
            total += bank.weights[d] * s;
        }
    }
    Ok(total)
}

/// Saved per-image state for one bank, used by the training backward pass.
pub struct BankCache {
    /// Projection outputs `H_s`, each `(D, P)`.
    pub h: Vec<Array2<f32>>,
    /// Interaction map `(D, P)`.
    pub z: Array2<f32>,
}

/// Forward one image's flat feature map `(K, P)` through all banks,
/// returning the high-order embedding tail and the cache.
pub fn forward_flat(
    x_flat: &ArrayView2<f32>,
    params: &HighOrderParams,
) -> Result<(Vec<f64>, Vec<BankCache>)> {
    let p = x_flat.dim().1 as f64;
    let mut tail = Vec::new();
    let mut caches = Vec::with_capacity(params.banks.len());
    for bank in &params.banks {
        let mut h = Vec::with_capacity(bank.order);
        for proj in &bank.projections {
            h.push(proj.dot(x_flat));
        }
        let mut z = h[0].clone();
        for hs in &h[1..] {
            z *= hs;
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite interaction values at order {}",
                bank.order
            )));
        }
        for d in 0..bank.rank() {
            let s: f64 = z.index_axis(Axis(0), d).iter().map(|&v| v as f64).sum();
            tail.push(bank.weights[d] * (s / p));
        }
        caches.push(BankCache { h, z });
    }
    Ok((tail, caches))
}

/// Gradients of one image's high-order tail w.r.t. the flat input, the
/// projections, and the combination weights.
///
/// `g_tail` holds the embedding gradient for this image's high-order part
/// (concatenated across banks). Projection/weight gradients accumulate into
/// `g_proj` / `g_weights`, which mirror the bank layout.
pub fn backward_flat(
    x_flat: &ArrayView2<f32>,
    params: &HighOrderParams,
    caches: &[BankCache],
    g_tail: &[f64],
    g_proj: &mut [Vec<Array2<f32>>],
    g_weights: &mut [Array1<f64>],
) -> Array2<f32> {
    let (k, p) = x_flat.dim();
    let inv_p = 1.0 / p as f64;
    let mut gx = Array2::<f32>::zeros((k, p));
    let mut offset = 0usize;
    for (bi, bank) in params.banks.iter().enumerate() {
        let d = bank.rank();
        let cache = &caches[bi];
        let g_out = &g_tail[offset..offset + d];
        offset += d;

        // gap(Z)[d] enters the embedding scaled by a[d]; spread spatially.
        let mut gz = Array2::<f32>::zeros((d, p));
        for (di, mut row) in gz.rows_mut().into_iter().enumerate() {
            let gap: f64 = cache.z.index_axis(Axis(0), di).iter().map(|&v| v as f64).sum::<f64>()
                * inv_p;
            g_weights[bi][di] += g_out[di] * gap;
            let gv = (g_out[di] * bank.weights[di] * inv_p) as f32;
            row.fill(gv);
        }

        // dH_s = dZ * prod_{t != s} H_t via prefix/suffix products.
        let r = bank.order;
        let mut prefix: Vec<Array2<f32>> = Vec::with_capacity(r);
        let mut acc = Array2::<f32>::ones((d, p));
        for s in 0..r {
            prefix.push(acc.clone());
            acc *= &cache.h[s];
        }
        let mut suffix = Array2::<f32>::ones((d, p));
        for s in (0..r).rev() {
            let gh = &gz * &prefix[s] * &suffix;
            g_proj[bi][s] = &g_proj[bi][s] + &gh.dot(&x_flat.t());
            gx = gx + bank.projections[s].t().dot(&gh);
            suffix *= &cache.h[s];
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_stream;
    use ndarray::Array3;

    fn random_map(k: usize, m: usize, n: usize, seed: u64) -> FeatureMap {
        let mut rng = seeded_stream(seed, "ho-map");
        let data = Array3::from_shape_fn((k, m, n), |_| normal(&mut rng) as f32);
        FeatureMap::new(data, "test").unwrap()
    }

    /// Scalar-loop oracle for `Z[d, p] = prod_s <u_s^d, x_p>`.
    fn degree_r_naive(x: &FeatureMap, bank: &OrderBank) -> Array3<f64> {
        let (k, m, n) = x.data.dim();
        let d_out = bank.rank();
        let mut z = Array3::<f64>::zeros((d_out, m, n));
        for d in 0..d_out {
            for i in 0..m {
                for j in 0..n {
                    let mut prod = 1.0f64;
                    for proj in &bank.projections {
                        let mut dot = 0.0f64;
                        for ch in 0..k {
                            dot += proj[(d, ch)] as f64 * x.data[(ch, i, j)] as f64;
                        }
                        prod *= dot;
                    }
                    z[(d, i, j)] = prod;
                }
            }
        }
        z
    }

    #[test]
    fn identity_projection_returns_input() {
        let x = random_map(3, 2, 2, 1);
        let bank = OrderBank::new(vec![Array2::eye(3)], Array1::ones(3)).unwrap();
        let z = degree_r_maps(&x, &bank).unwrap();
        assert_eq!(z.data, x.data);
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        let x = FeatureMap::new(Array3::zeros((4, 3, 3)), "z").unwrap();
        let mut rng = seeded_stream(2, "ho");
        for order in 1..=3 {
            let bank = OrderBank::init(order, 4, 5, &mut rng);
            let z = degree_r_maps(&x, &bank).unwrap();
            assert!(z.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn degree_two_matches_scalar_loop() {
        let mut rng = seeded_stream(3, "ho2");
        let x = random_map(3, 2, 2, 4);
        let bank = OrderBank::init(2, 3, 4, &mut rng);
        let z = degree_r_maps(&x, &bank).unwrap();
        let want = degree_r_naive(&x, &bank);
        for (got, want) in z.data.iter().zip(want.iter()) {
            assert!((*got as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn first_order_integrate_is_gap() {
        let x = random_map(5, 3, 4, 5);
        let e = integrate(&x, &HighOrderParams::first_order()).unwrap();
        assert_eq!(e.dim(), 5);
        for ch in 0..5 {
            let gap: f64 =
                x.data.index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum::<f64>() / 12.0;
            assert!((e.values[ch] - gap).abs() <= 1e-9);
        }
    }

    #[test]
    fn constant_map_integrates_exactly() {
        // X[k, ., .] = v_k: GAP(Z^2)[d] = <u1^d, v> * <u2^d, v> with no
        // averaging error.
        let mut rng = seeded_stream(6, "ho-const");
        let v: Vec<f32> = (0..3).map(|_| normal(&mut rng) as f32).collect();
        let data = Array3::from_shape_fn((3, 2, 2), |(k, _, _)| v[k]);
        let x = FeatureMap::new(data, "const").unwrap();
        let bank = OrderBank::init(2, 3, 4, &mut rng);
        let params = HighOrderParams {
            max_order: 2,
            banks: vec![bank.clone()],
        };
        let e = integrate(&x, &params).unwrap();
        for d in 0..4 {
            let mut dots = [0.0f64; 2];
            for (s, dot) in dots.iter_mut().enumerate() {
                *dot = (0..3)
                    .map(|ch| bank.projections[s][(d, ch)] as f64 * v[ch] as f64)
                    .sum();
            }
            let want = bank.weights[d] * dots[0] * dots[1];
            let got = e.values[3 + d];
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn response_matches_brute_force_sum_over_locations() {
        let mut rng = seeded_stream(7, "ho-resp");
        let x = random_map(3, 4, 4, 8);
        let bank = OrderBank::init(2, 3, 5, &mut rng);
        let params = HighOrderParams {
            max_order: 2,
            banks: vec![bank.clone()],
        };
        let w1: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
        let got = polynomial_response(&x, &params, &w1).unwrap();

        let mut want = 0.0f64;
        let z = degree_r_naive(&x, &bank);
        for i in 0..4 {
            for j in 0..4 {
                for ch in 0..3 {
                    want += w1[ch] * x.data[(ch, i, j)] as f64;
                }
                for d in 0..5 {
                    want += bank.weights[d] * z[(d, i, j)];
                }
            }
        }
        assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn scaling_input_scales_maps_by_power_of_order() {
        // Power-of-two scaling commutes with rounding, so equality is exact.
        let x = random_map(3, 3, 3, 9);
        let mut rng = seeded_stream(10, "ho-hom");
        for order in 1..=3 {
            let bank = OrderBank::init(order, 3, 4, &mut rng);
            let z1 = degree_r_maps(&x, &bank).unwrap();
            let xs = FeatureMap::new(x.data.mapv(|v| 2.0 * v), "s").unwrap();
            let z2 = degree_r_maps(&xs, &bank).unwrap();
            let factor = 2.0f32.powi(order as i32);
            for (a, b) in z1.data.iter().zip(z2.data.iter()) {
                assert_eq!(*b, factor * *a, "order {order}");
            }
        }
    }

    #[test]
    fn permuting_locations_permutes_maps_and_preserves_gap() {
        let x = random_map(3, 2, 3, 11);
        let mut rng = seeded_stream(12, "ho-perm");
        let bank = OrderBank::init(2, 3, 4, &mut rng);
        let params = HighOrderParams {
            max_order: 2,
            banks: vec![bank.clone()],
        };
        // Swap two locations.
        let mut data = x.data.clone();
        for ch in 0..3 {
            data.swap((ch, 0, 1), (ch, 1, 2));
        }
        let xp = FeatureMap::new(data, "perm").unwrap();
        let z = degree_r_maps(&x, &bank).unwrap();
        let zp = degree_r_maps(&xp, &bank).unwrap();
        for d in 0..4 {
            assert_eq!(z.data[(d, 0, 1)], zp.data[(d, 1, 2)]);
            assert_eq!(z.data[(d, 1, 2)], zp.data[(d, 0, 1)]);
        }
        let e = integrate(&x, &params).unwrap();
        let ep = integrate(&xp, &params).unwrap();
        for (a, b) in e.values.iter().zip(ep.values.iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = random_map(3, 2, 2, 13);
        let mut rng = seeded_stream(14, "ho-mis");
        let bank = OrderBank::init(2, 5, 4, &mut rng);
        assert!(matches!(degree_r_maps(&x, &bank), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = seeded_stream(15, "ho-fd");
        let params = HighOrderParams::init(3, 3, &[4, 3], &mut rng).unwrap();
        let x = random_map(3, 2, 2, 16);
        let flat = x.data.view().into_shape_with_order((3, 4)).unwrap();
        let (tail, caches) = forward_flat(&flat, &params).unwrap();
        let g_tail: Vec<f64> = (0..tail.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
        let mut g_proj: Vec<Vec<Array2<f32>>> = params
            .banks
            .iter()
            .map(|b| b.projections.iter().map(|p| Array2::zeros(p.dim())).collect())
            .collect();
        let mut g_weights: Vec<Array1<f64>> =
            params.banks.iter().map(|b| Array1::zeros(b.rank())).collect();
        let gx = backward_flat(&flat, &params, &caches, &g_tail, &mut g_proj, &mut g_weights);

        let loss = |flat: &Array2<f32>, params: &HighOrderParams| -> f64 {
            let (tail, _) = forward_flat(&flat.view(), params).unwrap();
            tail.iter().zip(g_tail.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-3;
        for &(k, p) in &[(0, 0), (1, 2), (2, 3)] {
            let mut fp = flat.to_owned();
            fp[(k, p)] += h as f32;
            let mut fm = flat.to_owned();
            fm[(k, p)] -= h as f32;
            let fd = (loss(&fp, &params) - loss(&fm, &params)) / (2.0 * h);
            let an = gx[(k, p)] as f64;
            assert!((fd - an).abs() <= 1e-2 * an.abs().max(0.1), "gx fd={fd} an={an}");
        }
        // Projection gradient probe.
        let mut pp = params.clone();
        pp.banks[0].projections[1][(2, 1)] += h as f32;
        let mut pm = params.clone();
        pm.banks[0].projections[1][(2, 1)] -= h as f32;
        let flat_owned = flat.to_owned();
        let fd = (loss(&flat_owned, &pp) - loss(&flat_owned, &pm)) / (2.0 * h);
        let an = g_proj[0][1][(2, 1)] as f64;
        assert!((fd - an).abs() <= 1e-2 * an.abs().max(0.1), "gu fd={fd} an={an}");
        // Combination-weight gradient probe (exact: tail is linear in a).
        let mut wp = params.clone();
        wp.banks[1].weights[0] += h;
        let mut wm = params.clone();
        wm.banks[1].weights[0] -= h;
        let fd = (loss(&flat_owned, &wp) - loss(&flat_owned, &wm)) / (2.0 * h);
        let an = g_weights[1][0];
        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "ga fd={fd} an={an}");
    }
}
