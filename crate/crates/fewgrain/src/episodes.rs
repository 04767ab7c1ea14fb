//! Episode sampling and evaluation: C-way K-shot tasks over the novel
//! split, accuracy aggregation with 95% confidence intervals, and the
//! all-novel / base-plus-novel protocols.

use std::collections::HashMap;
use std::sync::Mutex;

use ndarray::{Array1, Array2};
use rand::RngCore;

use crate::backbone::{BackboneModel, ClassifierHead};
use crate::config::{ClassifierKind, RunConfig};
use crate::dataset::{load_image, resize_standardize, ChannelStats, DatasetManifest};
use crate::error::{Error, Result};
use crate::fewshot::{classify_cosine, classify_prototype, classify_svm, imprint, imprinted_scores};
use crate::focusarea::{extract_region_sized, fuse, grad_cam, CamClass};
use crate::nn::{sample_without_replacement, seeded_stream};
use crate::types::{Embedding, Episode};

/// Evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Mean accuracy over E sampled C-way K-shot episodes.
    Episodic,
    /// One task whose ways are all novel classes; remaining novel images
    /// are the queries; repeated over several support draws.
    AllNovel,
    /// Imprinted head scored over the union of base and novel labels.
    BasePlusNovel,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Episodic => write!(f, "episodic"),
            Protocol::AllNovel => write!(f, "all-novel"),
            Protocol::BasePlusNovel => write!(f, "base-plus-novel"),
        }
    }
}

/// Aggregated evaluation results.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub ways: usize,
    pub shots: usize,
    pub episodes: usize,
    pub queries_per_episode: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub per_episode_acc: Vec<f64>,
    /// Global class ids indexing the confusion matrix rows/columns.
    pub classes: Vec<usize>,
    /// `confusion[(i, j)]` counts queries of class `classes[i]` predicted
    /// as `classes[j]`, aggregated over episodes.
    pub confusion: Array2<u64>,
}

impl EvalReport {
    /// Accuracy per class: diagonal over row sum.
    pub fn per_class_acc(&self) -> Vec<(usize, f64)> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let row: u64 = self.confusion.row(i).sum();
                let acc = if row == 0 {
                    0.0
                } else {
                    self.confusion[(i, i)] as f64 / row as f64
                };
                (c, acc)
            })
            .collect()
    }

    /// Versioned human-readable report.
    pub fn to_text(&self) -> String {
        let mut s = String::from("fewgrain-eval v1\n");
        s.push_str(&format!("protocol = {}\n", self.protocol));
        s.push_str(&format!("ways = {}\n", self.ways));
        s.push_str(&format!("shots = {}\n", self.shots));
        s.push_str(&format!("episodes = {}\n", self.episodes));
        s.push_str(&format!("queries_per_episode = {}\n", self.queries_per_episode));
        s.push_str(&format!("mean_acc = {:.6}\n", self.mean_acc));
        s.push_str("# ci95 = 1.96 * sample_std / sqrt(E), sample std uses E-1\n");
        s.push_str(&format!("ci95 = {:.6}\n", self.ci95));
        for (c, acc) in self.per_class_acc() {
            s.push_str(&format!("class_acc {c} = {acc:.6}\n"));
        }
        s
    }

    /// One row per episode.
    pub fn to_episode_csv(&self) -> String {
        let mut s = String::from("episode,accuracy\n");
        for (i, acc) in self.per_episode_acc.iter().enumerate() {
            s.push_str(&format!("{i},{acc:.6}\n"));
        }
        s
    }

    /// Counts with a class-id header row/column.
    pub fn to_confusion_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in &self.classes {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            s.push_str(&c.to_string());
            for j in 0..self.classes.len() {
                s.push_str(&format!(",{}", self.confusion[(i, j)]));
            }
            s.push('\n');
        }
        s
    }
}

/// Mean and 95% confidence interval over per-episode accuracies
/// (`1.96 * s / sqrt(E)` with the sample standard deviation).
pub fn episodic_stats(per_episode: &[f64]) -> (f64, f64) {
    let e = per_episode.len();
    if e == 0 {
        return (0.0, 0.0);
    }
    if per_episode.iter().all(|&a| a == per_episode[0]) {
        // Identical accuracies have zero deviation; avoid summation noise.
        return (per_episode[0], 0.0);
    }
    let mean = per_episode.iter().sum::<f64>() / e as f64;
    let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (e - 1) as f64;
    (mean, 1.96 * var.sqrt() / (e as f64).sqrt())
}

/// Sample one C-way K-shot episode from per-class item pools.
///
/// `classes` pairs each global class id with its items. Classes are chosen
/// without replacement, then `shots + q_per_class` distinct items per class;
/// support and query are disjoint by construction.
pub fn sample_episode_items<T: Clone>(
    classes: &[(usize, Vec<T>)],
    ways: usize,
    shots: usize,
    q_per_class: usize,
    rng: &mut impl RngCore,
) -> Result<Episode<T>> {
    if ways == 0 || shots == 0 {
        return Err(Error::Config("episode requires ways >= 1 and shots >= 1".into()));
    }
    if classes.len() < ways {
        return Err(Error::Data(format!(
            "need {ways} novel classes, have {}",
            classes.len()
        )));
    }
    let chosen = sample_without_replacement(classes.len(), ways, rng);
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * q_per_class);
    let mut global_classes = Vec::with_capacity(ways);
    for (local, &ci) in chosen.iter().enumerate() {
        let (global_id, pool) = &classes[ci];
        let need = shots + q_per_class;
        if pool.len() < need {
            return Err(Error::Data(format!(
                "class {global_id} has {} items, episode needs {need}",
                pool.len()
            )));
        }
        let picks = sample_without_replacement(pool.len(), need, rng);
        for &p in picks[..shots].iter() {
            support.push((pool[p].clone(), local));
        }
        for &p in picks[shots..].iter() {
            query.push((pool[p].clone(), local));
        }
        global_classes.push(*global_id);
    }
    let episode = Episode {
        ways,
        shots,
        support,
        query,
        global_classes,
    };
    episode.validate()?;
    Ok(episode)
}

/// Sample an episode of image paths from a manifest's novel split.
pub fn sample_episode(
    manifest: &DatasetManifest,
    ways: usize,
    shots: usize,
    q_per_class: usize,
    rng: &mut impl RngCore,
) -> Result<Episode<std::path::PathBuf>> {
    let pools: Vec<(usize, Vec<std::path::PathBuf>)> = manifest
        .novel_classes()
        .into_iter()
        .map(|ci| {
            let items = (0..manifest.classes[ci].paths.len())
                .map(|i| manifest.image_path(ci, i))
                .collect();
            (ci, items)
        })
        .collect();
    sample_episode_items(&pools, ways, shots, q_per_class, rng).map_err(|e| match e {
        // Name the class rather than reporting its index.
        Error::Data(msg) => Error::Data(rewrite_class_index(&msg, manifest)),
        other => other,
    })
}

fn rewrite_class_index(msg: &str, manifest: &DatasetManifest) -> String {
    if let Some(rest) = msg.strip_prefix("class ") {
        if let Some((idx, tail)) = rest.split_once(' ') {
            if let Ok(ci) = idx.parse::<usize>() {
                if let Some(class) = manifest.classes.get(ci) {
                    return format!("class `{}` {tail}", class.name);
                }
            }
        }
    }
    msg.to_string()
}

/// A classification rule applied to one embedded episode.
pub trait EpisodeClassifier {
    fn classify(
        &self,
        support: &[(Embedding, usize)],
        queries: &[Embedding],
    ) -> Result<Vec<usize>>;
}

/// The spec classifiers as episode rules. `Imprint` runs against an empty
/// base head, which coincides with the cosine rule.
pub struct StandardClassifier(pub ClassifierKind);

impl EpisodeClassifier for StandardClassifier {
    fn classify(
        &self,
        support: &[(Embedding, usize)],
        queries: &[Embedding],
    ) -> Result<Vec<usize>> {
        match self.0 {
            ClassifierKind::Cosine => queries
                .iter()
                .map(|q| classify_cosine(support, q).map(|(c, _)| c))
                .collect(),
            ClassifierKind::NearestPrototype => queries
                .iter()
                .map(|q| classify_prototype(support, q).map(|(c, _)| c))
                .collect(),
            ClassifierKind::Svm => classify_svm(support, queries),
            ClassifierKind::Imprint => {
                let d = support
                    .first()
                    .map(|(e, _)| e.dim())
                    .ok_or_else(|| Error::Shape("empty support set".into()))?;
                let empty = ClassifierHead {
                    weight: Array2::<f64>::zeros((0, d)),
                    bias: None,
                };
                let head = imprint(&empty, support)?;
                queries
                    .iter()
                    .map(|q| imprinted_scores(&head, q).map(|(c, _)| c))
                    .collect()
            }
        }
    }
}

/// Score embedded episodes with a classifier and aggregate the statistics.
pub fn run_episodic(
    classifier: &dyn EpisodeClassifier,
    episodes: &[Episode<Embedding>],
    protocol: Protocol,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to evaluate".into()));
    }
    // Confusion over the union of global classes seen across episodes.
    let mut classes: Vec<usize> = episodes
        .iter()
        .flat_map(|e| e.global_classes.iter().copied())
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let index_of: HashMap<usize, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut confusion = Array2::<u64>::zeros((classes.len(), classes.len()));
    let mut per_episode = Vec::with_capacity(episodes.len());

    for episode in episodes {
        let queries: Vec<Embedding> = episode.query.iter().map(|(e, _)| e.clone()).collect();
        let preds = classifier.classify(&episode.support, &queries)?;
        let mut correct = 0usize;
        for ((_, truth), pred) in episode.query.iter().zip(preds.iter()) {
            if truth == pred {
                correct += 1;
            }
            let ti = index_of[&episode.global_classes[*truth]];
            let pi = index_of[&episode.global_classes[*pred]];
            confusion[(ti, pi)] += 1;
        }
        per_episode.push(correct as f64 / episode.query.len().max(1) as f64);
    }
    let (mean_acc, ci95) = episodic_stats(&per_episode);
    let first = &episodes[0];
    Ok(EvalReport {
        protocol,
        ways: first.ways,
        shots: first.shots,
        episodes: episodes.len(),
        queries_per_episode: first.query.len(),
        mean_acc,
        ci95,
        per_episode_acc: per_episode,
        classes,
        confusion,
    })
}

/// Model-bound embedding provider with optional focus-area fusion and a
/// per-path cache (keyed by the pipeline's fixed checkpoint + threshold).
pub struct EmbedPipeline<'a> {
    pub model: &'a BackboneModel,
    pub head: &'a ClassifierHead,
    pub aux: Option<&'a BackboneModel>,
    pub config: &'a RunConfig,
    pub stats: ChannelStats,
    pub use_focus: bool,
    cache: Mutex<HashMap<String, Array1<f64>>>,
}

impl<'a> EmbedPipeline<'a> {
    pub fn new(
        model: &'a BackboneModel,
        head: &'a ClassifierHead,
        aux: Option<&'a BackboneModel>,
        config: &'a RunConfig,
        stats: ChannelStats,
        use_focus: bool,
    ) -> Self {
        EmbedPipeline {
            model,
            head,
            aux,
            config,
            stats,
            use_focus,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Model-input size for preprocessing.
    fn input_size(&self) -> usize {
        self.model.input_dims.1
    }

    /// Embed one image file (with fusion when enabled), cached by path.
    pub fn embed_path(&self, path: &std::path::Path) -> Result<Embedding> {
        let key = path.to_string_lossy().to_string();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Embedding::new(hit.clone());
        }
        let raw = load_image(path)?;
        let img = resize_standardize(&raw, self.input_size(), &self.stats)?;
        let embedding = self.embed_image(&img)?;
        self.cache
            .lock()
            .unwrap()
            .insert(key, embedding.values.clone());
        Ok(embedding)
    }

    /// Embed an already-preprocessed image.
    pub fn embed_image(&self, img: &crate::types::LabeledImage) -> Result<Embedding> {
        if self.use_focus {
            let hm = grad_cam(self.model, self.head, img, CamClass::Auto)?;
            // The crop must match the input size of whichever model embeds
            // it: the main model for element-sum, the aux for concat.
            let crop_size = match self.config.fusion_mode {
                crate::config::FusionMode::ElementSum => self.model.input_dims.1,
                crate::config::FusionMode::ShallowConcat => self
                    .aux
                    .map(|a| a.input_dims.1)
                    .unwrap_or(self.config.image_size_aux),
            };
            let region = extract_region_sized(&hm, img, self.config.threshold, crop_size)?;
            fuse(self.model, self.aux, img, &region, self.config.fusion_mode)
        } else {
            let (_, embeds) = self.model.forward(std::slice::from_ref(img))?;
            Ok(embeds.into_iter().next().expect("one embedding"))
        }
    }
}

/// Per-invocation evaluation knobs (protocol, task shape, episode count).
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub ways: usize,
    pub shots: usize,
    pub q_per_class: usize,
    pub episodes: usize,
    /// Support draws for the all-novel and base-plus-novel protocols.
    pub support_draws: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            protocol: Protocol::Episodic,
            ways: 5,
            shots: 5,
            q_per_class: 20,
            episodes: 100,
            support_draws: 5,
        }
    }
}

/// Deterministic base-class holdout used for base-side queries: every 5th
/// image (index % 5 == 0) is reserved for evaluation.
pub fn base_holdout(len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..len {
        if i % 5 == 0 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

/// Run a full evaluation over a manifest with the pipeline's classifier.
pub fn evaluate(
    pipeline: &EmbedPipeline,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let config = pipeline.config;
    match opts.protocol {
        Protocol::Episodic => {
            let mut rng = seeded_stream(config.seed, "eval/episodic");
            let mut episodes = Vec::with_capacity(opts.episodes);
            for _ in 0..opts.episodes {
                let paths =
                    sample_episode(manifest, opts.ways, opts.shots, opts.q_per_class, &mut rng)?;
                episodes.push(paths.try_map(|p| pipeline.embed_path(&p))?);
            }
            run_episodic(
                &StandardClassifier(config.classifier),
                &episodes,
                Protocol::Episodic,
            )
        }
        Protocol::AllNovel => {
            let novel = manifest.novel_classes();
            if novel.is_empty() {
                return Err(Error::Data("manifest has no novel classes".into()));
            }
            let mut rng = seeded_stream(config.seed, "eval/all-novel");
            let mut episodes = Vec::with_capacity(opts.support_draws);
            for _ in 0..opts.support_draws {
                let mut support = Vec::new();
                let mut query = Vec::new();
                for (local, &ci) in novel.iter().enumerate() {
                    let n = manifest.classes[ci].paths.len();
                    if n < opts.shots + 1 {
                        return Err(Error::Data(format!(
                            "class `{}` has {n} images, all-novel needs {}",
                            manifest.classes[ci].name,
                            opts.shots + 1
                        )));
                    }
                    let picks = sample_without_replacement(n, n, &mut rng);
                    for &p in picks[..opts.shots].iter() {
                        support.push((pipeline.embed_path(&manifest.image_path(ci, p))?, local));
                    }
                    for &p in picks[opts.shots..].iter() {
                        query.push((pipeline.embed_path(&manifest.image_path(ci, p))?, local));
                    }
                }
                let episode = Episode {
                    ways: novel.len(),
                    shots: opts.shots,
                    support,
                    query,
                    global_classes: novel.clone(),
                };
                episode.validate()?;
                episodes.push(episode);
            }
            run_episodic(
                &StandardClassifier(config.classifier),
                &episodes,
                Protocol::AllNovel,
            )
        }
        Protocol::BasePlusNovel => {
            if config.classifier != ClassifierKind::Imprint {
                return Err(Error::Config(
                    "base-plus-novel evaluation requires classifier = imprint".into(),
                ));
            }
            evaluate_base_plus_novel(pipeline, manifest, opts)
        }
    }
}

fn evaluate_base_plus_novel(
    pipeline: &EmbedPipeline,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let base = manifest.base_classes();
    let novel = manifest.novel_classes();
    if base.is_empty() || novel.is_empty() {
        return Err(Error::Data("base-plus-novel needs both splits populated".into()));
    }
    if pipeline.head.classes() != base.len() {
        return Err(Error::Config(format!(
            "head has {} classes but the manifest has {} base classes",
            pipeline.head.classes(),
            base.len()
        )));
    }
    let total = base.len() + novel.len();
    let mut rng = seeded_stream(pipeline.config.seed, "eval/base-plus-novel");
    let mut per_draw = Vec::with_capacity(opts.support_draws);
    let mut confusion = Array2::<u64>::zeros((total, total));
    let mut queries_per_draw = 0usize;
    for _ in 0..opts.support_draws {
        // Imprint novel rows from a fresh support draw.
        let mut support = Vec::new();
        let mut novel_queries: Vec<(std::path::PathBuf, usize)> = Vec::new();
        for (local, &ci) in novel.iter().enumerate() {
            let n = manifest.classes[ci].paths.len();
            if n < opts.shots + 1 {
                return Err(Error::Data(format!(
                    "class `{}` has {n} images, needs {}",
                    manifest.classes[ci].name,
                    opts.shots + 1
                )));
            }
            let picks = sample_without_replacement(n, n, &mut rng);
            for &p in picks[..opts.shots].iter() {
                support.push((pipeline.embed_path(&manifest.image_path(ci, p))?, local));
            }
            for &p in picks[opts.shots..].iter() {
                novel_queries.push((manifest.image_path(ci, p), base.len() + local));
            }
        }
        let head = imprint(pipeline.head, &support)?;

        // Base queries come from the deterministic holdout.
        let mut queries = novel_queries;
        for (bi, &ci) in base.iter().enumerate() {
            let (_, held) = base_holdout(manifest.classes[ci].paths.len());
            for p in held {
                queries.push((manifest.image_path(ci, p), bi));
            }
        }
        let mut correct = 0usize;
        for (path, truth) in &queries {
            let z = pipeline.embed_path(path)?;
            let (pred, _) = imprinted_scores(&head, &z)?;
            if pred == *truth {
                correct += 1;
            }
            confusion[(*truth, pred)] += 1;
        }
        queries_per_draw = queries.len();
        per_draw.push(correct as f64 / queries.len().max(1) as f64);
    }
    let (mean_acc, ci95) = episodic_stats(&per_draw);
    let classes: Vec<usize> = base.iter().chain(novel.iter()).copied().collect();
    Ok(EvalReport {
        protocol: Protocol::BasePlusNovel,
        ways: total,
        shots: opts.shots,
        episodes: opts.support_draws,
        queries_per_episode: queries_per_draw,
        mean_acc,
        ci95,
        per_episode_acc: per_draw,
        classes,
        confusion,
    })
}
