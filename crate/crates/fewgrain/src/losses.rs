//! Center loss, the neighbor penalty on batch class means, the combined
//! center-neighbor (CN) loss, and the mini-batch center update rule.
//!
//! All loss math runs in f64. Gradients w.r.t. embeddings are analytic;
//! centers are updated by the explicit rule below, not by backpropagation.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::types::Embedding;

/// Per-class center vectors with their update bookkeeping.
#[derive(Debug, Clone)]
pub struct CenterState {
    /// `(classes, d)` center matrix.
    pub centers: Array2<f64>,
    /// Center learning rate (0.5 keeps updates half-way to the batch mean).
    pub gamma_c: f64,
    pub initialized: bool,
}

impl CenterState {
    /// Zero-initialized centers; the first update moves each center
    /// `gamma_c` of the way to its first batch mean.
    pub fn new(classes: usize, dim: usize, gamma_c: f64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::Config("centers need classes >= 1 and d >= 1".into()));
        }
        if !(0.0..=1.0).contains(&gamma_c) || gamma_c == 0.0 {
            return Err(Error::Config("center_lr must lie in (0, 1]".into()));
        }
        Ok(CenterState {
            centers: Array2::zeros((classes, dim)),
            gamma_c,
            initialized: true,
        })
    }

    pub fn classes(&self) -> usize {
        self.centers.dim().0
    }

    pub fn dim(&self) -> usize {
        self.centers.dim().1
    }
}

/// Mean embedding per class present in a batch.
#[derive(Debug, Clone)]
pub struct BatchClassMean {
    /// Class ids present, ascending.
    pub classes: Vec<usize>,
    /// One row per entry of `classes`.
    pub means: Array2<f64>,
    /// Sample count per present class.
    pub counts: Vec<usize>,
}

/// Compute per-class means for the classes present in the batch.
pub fn batch_class_means(z: &ArrayView2<f64>, labels: &[usize]) -> Result<BatchClassMean> {
    if z.dim().0 != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings vs {} labels",
            z.dim().0,
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let d = z.dim().1;
    let mut means = Array2::<f64>::zeros((classes.len(), d));
    let mut counts = vec![0usize; classes.len()];
    for (i, &label) in labels.iter().enumerate() {
        let ci = classes.binary_search(&label).unwrap();
        counts[ci] += 1;
        let mut row = means.row_mut(ci);
        row += &z.row(i);
    }
    for (mut row, &c) in means.rows_mut().into_iter().zip(counts.iter()) {
        row /= c as f64;
    }
    Ok(BatchClassMean {
        classes,
        means,
        counts,
    })
}

fn check_labels(labels: &[usize], state: &CenterState) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= state.classes()) {
        return Err(Error::Data(format!(
            "label {bad} has no center (state holds {} classes)",
            state.classes()
        )));
    }
    Ok(())
}

/// Center loss: `1/2 * sum_i ||z_i - c_{k_i}||^2` (a sum, not a mean).
pub fn center_loss(batch: &[(Embedding, usize)], state: &CenterState) -> Result<f64> {
    let (z, labels) = batch_to_arrays(batch)?;
    center_loss_arrays(&z.view(), &labels, state)
}

pub fn center_loss_arrays(
    z: &ArrayView2<f64>,
    labels: &[usize],
    state: &CenterState,
) -> Result<f64> {
    check_labels(labels, state)?;
    if z.dim().1 != state.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs center dim {}",
            z.dim().1,
            state.dim()
        )));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let diff = &z.row(i) - &state.centers.row(label);
        total += diff.dot(&diff);
    }
    Ok(0.5 * total)
}

/// Neighbor penalty: for each present class `k`, the negative
/// log-probability of `z_bar^k` being nearest (softmin over Euclidean
/// distance) to its own center among the present classes' centers;
/// averaged over present classes.
pub fn neighbor_penalty(means: &BatchClassMean, state: &CenterState) -> Result<f64> {
    check_labels(&means.classes, state)?;
    let mut total = 0.0;
    for (row, &k) in means.means.rows().into_iter().zip(means.classes.iter()) {
        let dists: Vec<f64> = means
            .classes
            .iter()
            .map(|&k2| {
                let diff = &row - &state.centers.row(k2);
                diff.dot(&diff).sqrt()
            })
            .collect();
        let own = means.classes.iter().position(|&k2| k2 == k).unwrap();
        total += dists[own] + log_sum_exp_neg(&dists);
    }
    Ok(total / means.classes.len() as f64)
}

/// `log sum_j exp(-d_j)` with max-shift for stability.
fn log_sum_exp_neg(dists: &[f64]) -> f64 {
    let m = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let s: f64 = dists.iter().map(|&d| (-(d - m)).exp()).sum();
    -m + s.ln()
}

/// Center-neighbor loss: `L_c + beta * L_N`.
pub fn cn_loss(batch: &[(Embedding, usize)], state: &CenterState, beta: f64) -> Result<f64> {
    let (z, labels) = batch_to_arrays(batch)?;
    let (lc, ln) = cn_loss_parts(&z.view(), &labels, state, beta)?;
    Ok(lc + beta * ln)
}

/// Both components of the CN loss.
pub fn cn_loss_parts(
    z: &ArrayView2<f64>,
    labels: &[usize],
    state: &CenterState,
    beta: f64,
) -> Result<(f64, f64)> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::Config("beta must be a finite nonnegative real".into()));
    }
    let lc = center_loss_arrays(z, labels, state)?;
    let means = batch_class_means(z, labels)?;
    let ln = neighbor_penalty(&means, state)?;
    Ok((lc, ln))
}

/// CN loss with its analytic gradient w.r.t. every embedding.
///
/// Returns `(L_c, L_N, grad)` where `grad` is `(n, d)` and
/// `d(L_c + beta L_N)/dz_i = grad[i]`.
pub fn cn_loss_grad(
    z: &ArrayView2<f64>,
    labels: &[usize],
    state: &CenterState,
    beta: f64,
) -> Result<(f64, f64, Array2<f64>)> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::Config("beta must be a finite nonnegative real".into()));
    }
    check_labels(labels, state)?;
    let (n, d) = z.dim();
    let mut grad = Array2::<f64>::zeros((n, d));

    // Center part: d/dz_i of 1/2 ||z_i - c||^2 is (z_i - c).
    let mut lc = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let diff = &z.row(i) - &state.centers.row(label);
        lc += 0.5 * diff.dot(&diff);
        grad.row_mut(i).assign(&diff);
    }

    // Neighbor part through the class means.
    let means = batch_class_means(z, labels)?;
    let present = means.classes.len();
    let mut ln = 0.0;
    for (mi, &k) in means.classes.iter().enumerate() {
        let row = means.means.row(mi);
        let dists: Vec<f64> = means
            .classes
            .iter()
            .map(|&k2| {
                let diff = &row - &state.centers.row(k2);
                diff.dot(&diff).sqrt()
            })
            .collect();
        let own = mi;
        let lse = log_sum_exp_neg(&dists);
        ln += dists[own] + lse;

        if beta > 0.0 {
            // d(term)/d(mean) = u_own - sum_j w_j u_j with u_j the unit
            // vector toward center j and w_j the softmin weights.
            let weights: Vec<f64> = dists.iter().map(|&dj| (-dj - lse).exp()).collect();
            let mut dmean = Array1::<f64>::zeros(d);
            for (j, &k2) in means.classes.iter().enumerate() {
                let diff = &row - &state.centers.row(k2);
                let dist = dists[j];
                if dist <= 1e-12 {
                    continue;
                }
                let unit = diff.mapv(|v| v / dist);
                if j == own {
                    dmean += &unit;
                }
                dmean.scaled_add(-weights[j], &unit);
            }
            // Spread over the samples of class k: d(mean)/dz_i = 1/n_k.
            let scale = beta / (present as f64 * means.counts[mi] as f64);
            for (i, &label) in labels.iter().enumerate() {
                if label == k {
                    grad.row_mut(i).scaled_add(scale, &dmean);
                }
            }
        }
    }
    ln /= present as f64;
    Ok((lc, ln, grad))
}

/// Move each present class's center `gamma_c` of the way toward the batch
/// mean: `c_k <- c_k - gamma_c * (c_k - z_bar^k)`. Absent classes are
/// untouched.
pub fn update_centers(batch: &[(Embedding, usize)], state: &CenterState) -> Result<CenterState> {
    let (z, labels) = batch_to_arrays(batch)?;
    let mut next = state.clone();
    update_centers_arrays(&z.view(), &labels, &mut next)?;
    Ok(next)
}

pub fn update_centers_arrays(
    z: &ArrayView2<f64>,
    labels: &[usize],
    state: &mut CenterState,
) -> Result<()> {
    if !state.initialized {
        return Err(Error::Config("center state not initialized".into()));
    }
    check_labels(labels, state)?;
    let means = batch_class_means(z, labels)?;
    for (mi, &k) in means.classes.iter().enumerate() {
        let delta = (&state.centers.row(k) - &means.means.row(mi)).mapv(|v| v * state.gamma_c);
        let mut row = state.centers.row_mut(k);
        row -= &delta;
    }
    Ok(())
}

fn batch_to_arrays(batch: &[(Embedding, usize)]) -> Result<(Array2<f64>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let d = batch[0].0.dim();
    let mut z = Array2::<f64>::zeros((batch.len(), d));
    let mut labels = Vec::with_capacity(batch.len());
    for (i, (e, label)) in batch.iter().enumerate() {
        if e.dim() != d {
            return Err(Error::Shape("embeddings in batch disagree on dim".into()));
        }
        z.row_mut(i).assign(&e.values);
        labels.push(*label);
    }
    Ok((z, labels))
}
