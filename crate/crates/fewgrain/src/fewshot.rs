//! Few-shot classification heads over embeddings: cosine similarity,
//! Euclidean nearest prototype, one-vs-rest linear SVM, and weight
//! imprinting for joint base+novel evaluation.

use ndarray::{Array1, Array2};

use crate::backbone::ClassifierHead;
use crate::error::{Error, Result};
use crate::types::Embedding;

/// Per-class prototype embeddings for one episode.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// `(classes, d)`, row `c` is the prototype of local class `c`.
    pub prototypes: Array2<f64>,
}

/// Joint base+novel head with unit-norm rows, scored by cosine similarity.
#[derive(Debug, Clone)]
pub struct ImprintedHead {
    pub weight: Array2<f64>,
    /// Number of leading rows that came from the base head.
    pub base_classes: usize,
}

impl ImprintedHead {
    /// Check the unit-norm row invariant.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.weight.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "imprinted row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

fn class_count(support: &[(Embedding, usize)]) -> Result<usize> {
    if support.is_empty() {
        return Err(Error::Shape("empty support set".into()));
    }
    let max = support.iter().map(|(_, c)| *c).max().unwrap();
    Ok(max + 1)
}

fn argmax_lowest(scores: &Array1<f64>) -> usize {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn argmin_lowest(values: &Array1<f64>) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Cosine prototype per class: the L2-normalized mean of the L2-normalized
/// support embeddings (the imprinting construction).
pub fn cosine_prototypes(support: &[(Embedding, usize)]) -> Result<PrototypeSet> {
    let classes = class_count(support)?;
    let d = support[0].0.dim();
    let mut sums = Array2::<f64>::zeros((classes, d));
    let mut counts = vec![0usize; classes];
    for (e, c) in support {
        let unit = e.normalize()?;
        let mut row = sums.row_mut(*c);
        row += &unit.values;
        counts[*c] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Shape(format!("class {c} has no support items")));
        }
        let mut row = sums.row_mut(c);
        row /= count as f64;
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!(
                "class {c}: support embeddings cancel to a zero mean"
            )));
        }
        row /= norm;
    }
    Ok(PrototypeSet { prototypes: sums })
}

/// Cosine-similarity classification: unit-normalized query against the
/// cosine prototypes. Ties break toward the lowest class index.
pub fn classify_cosine(
    support: &[(Embedding, usize)],
    query: &Embedding,
) -> Result<(usize, Array1<f64>)> {
    let protos = cosine_prototypes(support)?;
    let q = query.normalize()?;
    let scores = protos.prototypes.dot(&q.values);
    Ok((argmax_lowest(&scores), scores))
}

/// Arithmetic-mean prototypes (zero vectors permitted).
pub fn mean_prototypes(support: &[(Embedding, usize)]) -> Result<PrototypeSet> {
    let classes = class_count(support)?;
    let d = support[0].0.dim();
    let mut sums = Array2::<f64>::zeros((classes, d));
    let mut counts = vec![0usize; classes];
    for (e, c) in support {
        let mut row = sums.row_mut(*c);
        row += &e.values;
        counts[*c] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::Shape(format!("class {c} has no support items")));
        }
        let mut row = sums.row_mut(c);
        row /= count as f64;
    }
    Ok(PrototypeSet { prototypes: sums })
}

/// Nearest-prototype classification by Euclidean distance. Returns the
/// predicted class and the distance vector.
pub fn classify_prototype(
    support: &[(Embedding, usize)],
    query: &Embedding,
) -> Result<(usize, Array1<f64>)> {
    let protos = mean_prototypes(support)?;
    let dists = Array1::from_iter(protos.prototypes.rows().into_iter().map(|row| {
        let diff = &row - &query.values;
        diff.dot(&diff).sqrt()
    }));
    Ok((argmin_lowest(&dists), dists))
}

/// One linear max-margin binary classifier trained by dual coordinate
/// descent on L2-regularized hinge loss. Features are augmented with a
/// constant 1 so the (regularized) bias is learned jointly.
fn svm_binary(x: &Array2<f64>, y: &[f64], c_reg: f64, tol: f64) -> Result<Array1<f64>> {
    let (n, d) = x.dim();
    let mut w = Array1::<f64>::zeros(d + 1);
    let mut alpha = vec![0.0f64; n];
    let q_diag: Vec<f64> = (0..n)
        .map(|i| {
            let xi = x.row(i);
            xi.dot(&xi) + 1.0
        })
        .collect();
    let max_passes = 10_000usize;
    for pass in 0..max_passes {
        let mut max_violation = 0.0f64;
        for i in 0..n {
            let xi = x.row(i);
            let margin = y[i] * (w.slice(ndarray::s![..d]).dot(&xi) + w[d]);
            let g = margin - 1.0;
            // Projected gradient for the box constraint 0 <= alpha <= C.
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c_reg {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg.abs() > 1e-14 {
                let old = alpha[i];
                alpha[i] = (old - g / q_diag[i]).clamp(0.0, c_reg);
                let delta = (alpha[i] - old) * y[i];
                if delta != 0.0 {
                    for j in 0..d {
                        w[j] += delta * xi[j];
                    }
                    w[d] += delta;
                }
            }
        }
        if max_violation < tol {
            return Ok(w);
        }
        if pass == max_passes - 1 {
            return Err(Error::Numeric(format!(
                "svm solver did not converge in {max_passes} passes \
                 (last max projected gradient {max_violation:.3e}, tol {tol:.1e})"
            )));
        }
    }
    unreachable!()
}

/// Fitted one-vs-rest linear SVM over episode classes.
#[derive(Debug, Clone)]
pub struct SvmModel {
    /// `(classes, d + 1)`; last column is the bias.
    pub weights: Array2<f64>,
}

/// Regularization constant for the SVM head (recorded, not configurable).
pub const SVM_C: f64 = 1.0;
const SVM_TOL: f64 = 1e-4;

/// Fit one-vs-rest linear max-margin classifiers on the support set.
pub fn fit_svm(support: &[(Embedding, usize)]) -> Result<SvmModel> {
    let classes = class_count(support)?;
    if classes < 2 {
        return Err(Error::Config("svm needs at least 2 classes".into()));
    }
    let d = support[0].0.dim();
    let mut x = Array2::<f64>::zeros((support.len(), d));
    for (i, (e, _)) in support.iter().enumerate() {
        x.row_mut(i).assign(&e.values);
    }
    let mut weights = Array2::<f64>::zeros((classes, d + 1));
    for c in 0..classes {
        let y: Vec<f64> = support
            .iter()
            .map(|(_, label)| if *label == c { 1.0 } else { -1.0 })
            .collect();
        let w = svm_binary(&x, &y, SVM_C, SVM_TOL)?;
        weights.row_mut(c).assign(&w);
    }
    Ok(SvmModel { weights })
}

impl SvmModel {
    /// Decision values for one query.
    pub fn decision(&self, query: &Embedding) -> Array1<f64> {
        let d = self.weights.dim().1 - 1;
        Array1::from_iter(self.weights.rows().into_iter().map(|row| {
            row.slice(ndarray::s![..d]).dot(&query.values) + row[d]
        }))
    }
}

/// Fit on the support and classify a query batch by maximum decision value.
pub fn classify_svm(
    support: &[(Embedding, usize)],
    queries: &[Embedding],
) -> Result<Vec<usize>> {
    let model = fit_svm(support)?;
    Ok(queries
        .iter()
        .map(|q| argmax_lowest(&model.decision(q)))
        .collect())
}

/// Imprint novel-class rows onto a base head: every novel row is the
/// normalized mean of normalized support embeddings; base rows are
/// L2-normalized copies of the base weights.
pub fn imprint(head: &ClassifierHead, support: &[(Embedding, usize)]) -> Result<ImprintedHead> {
    let novel = cosine_prototypes(support)?;
    let d = head.weight.dim().1;
    if novel.prototypes.dim().1 != d {
        return Err(Error::Shape(format!(
            "support embeddings are {}-d but head is {}-d",
            novel.prototypes.dim().1,
            d
        )));
    }
    let base = head.weight.dim().0;
    let total = base + novel.prototypes.dim().0;
    let mut weight = Array2::<f64>::zeros((total, d));
    for (i, row) in head.weight.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!("base head row {i} has zero norm")));
        }
        weight.row_mut(i).assign(&row.mapv(|v| v / norm));
    }
    for (i, row) in novel.prototypes.rows().into_iter().enumerate() {
        weight.row_mut(base + i).assign(&row);
    }
    let out = ImprintedHead {
        weight,
        base_classes: base,
    };
    out.validate()?;
    Ok(out)
}

/// Cosine scores of a query against every imprinted row.
pub fn imprinted_scores(head: &ImprintedHead, query: &Embedding) -> Result<(usize, Array1<f64>)> {
    let q = query.normalize()?;
    let scores = head.weight.dot(&q.values);
    Ok((argmax_lowest(&scores), scores))
}
