//! Core value types shared by every module: images, feature maps,
//! embeddings, and episodes.

use ndarray::{Array1, Array3};

use crate::error::{Error, Result};

/// Which split an image belongs to during an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Classes used to train the feature extractor.
    Base,
    /// Labeled exemplars of held-out classes.
    NovelSupport,
    /// Unlabeled test items of held-out classes.
    NovelQuery,
}

/// A decoded image with an optional class label.
///
/// Pixels are `(H, W, C)` with values in `[0, 1]` at decode time; after
/// [`crate::dataset::preprocess`] they are standardized and only required
/// to be finite.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub pixels: Array3<f32>,
    pub label: Option<usize>,
    pub source_path: String,
    pub split: Split,
}

impl LabeledImage {
    /// Build an image, checking the shape and value invariants.
    pub fn new(
        pixels: Array3<f32>,
        label: Option<usize>,
        source_path: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("image has zero area ({h}x{w})")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("channel count {c} not in {{1, 3}}")));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite pixels".into()));
        }
        Ok(Self {
            pixels,
            label,
            source_path: source_path.into(),
            split,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

/// A `K x M x N` activation tensor from a convolutional layer.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// Channel-major data: `(K, M, N)`.
    pub data: Array3<f32>,
    /// Identifies the producing layer, e.g. `"resnet18-like/stage4"`.
    pub layer_tag: String,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, layer_tag: impl Into<String>) -> Result<Self> {
        let (k, m, n) = data.dim();
        if k == 0 || m == 0 || n == 0 {
            return Err(Error::Shape(format!("feature map has empty dim {k}x{m}x{n}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self {
            data,
            layer_tag: layer_tag.into(),
        })
    }

    /// Channel count `K`.
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Spatial dims `(M, N)`.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, m, n) = self.data.dim();
        (m, n)
    }
}

/// A d-dimensional feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Array1<f64>,
    /// Whether L2 normalization was applied.
    pub normalized: bool,
}

impl Embedding {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("embedding must have d >= 1".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("embedding contains non-finite values".into()));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }

    /// L2-normalized copy. Zero vectors are rejected.
    pub fn normalize(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Numeric("cannot normalize a zero embedding".into()));
        }
        Ok(Self {
            values: &self.values / n,
            normalized: true,
        })
    }
}

/// One C-way K-shot task: a labeled support set and a query set, with
/// class indices relabeled to `0..C-1` local to the episode.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub ways: usize,
    pub shots: usize,
    /// Exactly `ways * shots` items, `shots` per class.
    pub support: Vec<(T, usize)>,
    pub query: Vec<(T, usize)>,
    /// Maps local class index back to the global class id.
    pub global_classes: Vec<usize>,
}

impl<T> Episode<T> {
    /// Check the structural invariants: support balance and index ranges.
    pub fn validate(&self) -> Result<()> {
        if self.ways == 0 || self.shots == 0 {
            return Err(Error::Config("episode requires ways >= 1 and shots >= 1".into()));
        }
        if self.global_classes.len() != self.ways {
            return Err(Error::Shape(format!(
                "episode has {} global classes for {} ways",
                self.global_classes.len(),
                self.ways
            )));
        }
        let mut per_class = vec![0usize; self.ways];
        for (_, c) in &self.support {
            if *c >= self.ways {
                return Err(Error::Shape(format!("support class index {c} out of range")));
            }
            per_class[*c] += 1;
        }
        if per_class.iter().any(|&n| n != self.shots) {
            return Err(Error::Shape(format!(
                "support is unbalanced: counts {per_class:?}, expected {} each",
                self.shots
            )));
        }
        for (_, c) in &self.query {
            if *c >= self.ways {
                return Err(Error::Shape(format!("query class index {c} out of range")));
            }
        }
        Ok(())
    }

    /// Apply `f` to every item, keeping labels and the class mapping.
    pub fn try_map<U>(self, mut f: impl FnMut(T) -> Result<U>) -> Result<Episode<U>> {
        let support = self
            .support
            .into_iter()
            .map(|(t, c)| f(t).map(|u| (u, c)))
            .collect::<Result<Vec<_>>>()?;
        let query = self
            .query
            .into_iter()
            .map(|(t, c)| f(t).map(|u| (u, c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            ways: self.ways,
            shots: self.shots,
            support,
            query,
            global_classes: self.global_classes,
        })
    }
}
