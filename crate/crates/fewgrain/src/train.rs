//! Base-class training: joint softmax + center-neighbor supervision with
//! SGD (momentum 0.9, weight decay 5e-4) and the halve-every-20-epochs
//! learning-rate schedule.

use ndarray::{Array2, Axis};

use crate::backbone::{images_to_batch, BackboneModel, ClassifierHead};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{cn_loss_grad, update_centers_arrays, CenterState};
use crate::nn::{seeded_stream, shuffle, Sgd};
use crate::types::LabeledImage;

/// Supervision used during base training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy only.
    Softmax,
    /// Softmax plus the center loss (the CN loss at beta = 0).
    Center,
    /// Softmax plus the full center-neighbor loss.
    CenterNeighbor,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "center" => Ok(LossKind::Center),
            "cn" => Ok(LossKind::CenterNeighbor),
            other => Err(Error::Config(format!(
                "unknown loss `{other}`; expected softmax | center | cn"
            ))),
        }
    }
}

/// Knobs that are not part of [`RunConfig`] (operational, per-invocation).
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Classes per batch (P of the class-balanced sampler).
    pub batch_classes: usize,
    /// Images per class per batch (Q).
    pub batch_per_class: usize,
    pub loss: LossKind,
    /// Initial learning rate; the paper's schedule halves it every 20 epochs.
    pub base_lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_classes: 5,
            batch_per_class: 8,
            loss: LossKind::CenterNeighbor,
            base_lr: 1e-3,
        }
    }
}

/// Learning rate at a 0-indexed epoch: halved every 20 epochs.
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.5f64.powi((epoch / 20) as i32)
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean softmax cross-entropy over the epoch.
    pub loss_softmax: f64,
    /// Weighted center contribution `lambda * L_c` (zero when disabled).
    pub loss_center: f64,
    /// Weighted neighbor contribution `lambda * beta * L_N`.
    pub loss_n: f64,
    pub acc_base_val: f64,
}

/// Per-epoch statistics, serializable as CSV.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss_softmax,loss_center,loss_N,acc_base_val\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.4}\n",
                e.epoch, e.lr, e.loss_softmax, e.loss_center, e.loss_n, e.acc_base_val
            ));
        }
        s
    }
}

/// Class-balanced batch sampler: each batch draws P classes and Q images
/// per class, cycling through per-class pools that reshuffle when drained.
struct BalancedSampler {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    rng: rand_chacha::ChaCha12Rng,
    batch_classes: usize,
    batch_per_class: usize,
}

impl BalancedSampler {
    fn new(by_class: Vec<Vec<usize>>, p: usize, q: usize, seed: u64) -> Self {
        let mut rng = seeded_stream(seed, "train/sampler");
        let mut pools = by_class;
        for pool in pools.iter_mut() {
            shuffle(pool, &mut rng);
        }
        BalancedSampler {
            cursors: vec![0; pools.len()],
            pools,
            rng,
            batch_classes: p,
            batch_per_class: q,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n_classes = self.pools.len();
        let p = self.batch_classes.min(n_classes);
        let mut class_ids: Vec<usize> = (0..n_classes).collect();
        shuffle(&mut class_ids, &mut self.rng);
        class_ids.truncate(p);
        class_ids.sort_unstable();
        let mut batch = Vec::with_capacity(p * self.batch_per_class);
        for &c in &class_ids {
            for _ in 0..self.batch_per_class {
                if self.cursors[c] >= self.pools[c].len() {
                    shuffle(&mut self.pools[c], &mut self.rng);
                    self.cursors[c] = 0;
                }
                batch.push(self.pools[c][self.cursors[c]]);
                self.cursors[c] += 1;
            }
        }
        batch
    }
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut p = scores.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Top-1 accuracy of `head` on a labeled set, evaluated in chunks.
pub fn eval_accuracy(
    model: &BackboneModel,
    head: &ClassifierHead,
    images: &[LabeledImage],
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in images.chunks(128) {
        let x = images_to_batch(chunk, model.input_dims)?;
        let (_, z) = model.forward_arrays(&x)?;
        let scores = z.dot(&head.weight.t());
        for (i, img) in chunk.iter().enumerate() {
            let row = scores.index_axis(Axis(0), i);
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if Some(best) == img.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Train the extractor and head on preprocessed base-class images.
///
/// `train` images carry labels in `0..head.classes()`; `val` is scored for
/// the per-epoch `acc_base_val` column. Returns the log and the final
/// center state. Aborts with a numeric error naming the epoch and loss
/// component if the loss leaves the finite range.
pub fn train_base(
    model: &mut BackboneModel,
    head: &mut ClassifierHead,
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: &RunConfig,
    opts: &TrainOptions,
) -> Result<(TrainLog, CenterState)> {
    let n_classes = head.classes();
    if n_classes < 2 {
        return Err(Error::Config("training needs at least 2 base classes".into()));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, img) in train.iter().enumerate() {
        let label = img
            .label
            .ok_or_else(|| Error::Data(format!("unlabeled training image {}", img.source_path)))?;
        if label >= n_classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {n_classes} classes"
            )));
        }
        by_class[label].push(i);
    }
    if by_class.iter().any(|p| p.is_empty()) {
        return Err(Error::Data("every base class needs at least one image".into()));
    }

    let d = model.embedding_dim();
    if head.weight.dim().1 != d {
        return Err(Error::Shape(format!(
            "head dim {} does not match embedding dim {d}",
            head.weight.dim().1
        )));
    }
    let mut centers = CenterState::new(n_classes, d, config.center_lr)?;
    let mut sampler = BalancedSampler::new(
        by_class,
        opts.batch_classes,
        opts.batch_per_class,
        config.seed,
    );
    let batch_size = opts.batch_classes.min(n_classes) * opts.batch_per_class;
    let batches_per_epoch = train.len().div_ceil(batch_size).max(1);

    let (lambda, beta) = match opts.loss {
        LossKind::Softmax => (0.0, 0.0),
        LossKind::Center => (config.loss_mix, 0.0),
        LossKind::CenterNeighbor => (config.loss_mix, config.beta),
    };

    let mut sgd = Sgd::new(opts.base_lr, 0.9, 5e-4);
    let head_slot = model_f64_slots(model);
    let mut log = TrainLog::default();

    for epoch in 0..opts.epochs {
        let lr = lr_at_epoch(opts.base_lr, epoch);
        sgd.lr = lr;
        let mut sum_sm = 0.0;
        let mut sum_center = 0.0;
        let mut sum_n = 0.0;
        for _ in 0..batches_per_epoch {
            let idx = sampler.next_batch();
            let batch: Vec<LabeledImage> = idx.iter().map(|&i| train[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|img| img.label.unwrap()).collect();
            let x = images_to_batch(&batch, model.input_dims)?;
            let (z, cache) = model.forward_train(&x)?;
            let n = z.dim().0 as f64;

            // Softmax cross-entropy over all base classes.
            let scores = z.dot(&head.weight.t());
            let probs = softmax_rows(&scores);
            let mut loss_sm = 0.0;
            let mut dscores = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                loss_sm -= probs[(i, label)].max(1e-300).ln();
                dscores[(i, label)] -= 1.0;
            }
            loss_sm /= n;
            dscores.mapv_inplace(|v| v / n);

            // CN loss on the embeddings.
            let (lc, ln, grad_cn) = cn_loss_grad(&z.view(), &labels, &centers, beta)?;
            if !loss_sm.is_finite() {
                return Err(Error::Numeric(format!(
                    "softmax loss diverged at epoch {epoch}"
                )));
            }
            if !(lc.is_finite() && ln.is_finite()) {
                return Err(Error::Numeric(format!(
                    "center-neighbor loss diverged at epoch {epoch}"
                )));
            }
            sum_sm += loss_sm;
            sum_center += lambda * lc;
            sum_n += lambda * beta * ln;

            // Backward: head, then embeddings into the network.
            let d_w = dscores.t().dot(&z);
            let mut dz = dscores.dot(&head.weight);
            if lambda > 0.0 {
                dz.scaled_add(lambda, &grad_cn);
            }
            let (grads, a_grads) = model.backward(&x, &cache, &dz)?;
            model.sgd_step(&mut sgd, &grads, &a_grads);
            sgd.step_f64(
                head_slot,
                head.weight.as_slice_mut().unwrap(),
                d_w.as_slice().unwrap(),
            );
            if let Some(bias) = &mut head.bias {
                let db = dscores.sum_axis(Axis(0));
                sgd.step_f64(head_slot + 1, bias.as_slice_mut().unwrap(), db.as_slice().unwrap());
            }

            // Mini-batch center update with the fixed center learning rate.
            if lambda > 0.0 {
                update_centers_arrays(&z.view(), &labels, &mut centers)?;
            }
        }
        let acc = eval_accuracy(model, head, val)?;
        log.epochs.push(EpochStats {
            epoch,
            lr,
            loss_softmax: sum_sm / batches_per_epoch as f64,
            loss_center: sum_center / batches_per_epoch as f64,
            loss_n: sum_n / batches_per_epoch as f64,
            acc_base_val: acc,
        });
    }
    Ok((log, centers))
}

fn model_f64_slots(model: &BackboneModel) -> usize {
    match &model.neck {
        crate::backbone::Neck::Gap { high } => high.banks.len(),
        crate::backbone::Neck::Mlp { .. } => 0,
    }
}
