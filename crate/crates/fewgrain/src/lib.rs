//! Few-shot fine-grained image classification toolkit.
//!
//! The pipeline: a convolutional feature extractor trained on base classes
//! under joint softmax + center-neighbor supervision, high-order feature
//! integration over the last feature map, Grad-CAM focus-area localization
//! and fusion, and C-way K-shot episodic evaluation with cosine,
//! nearest-prototype, SVM, or imprinted-weights heads.
//!
//! Start with the runnable examples (`cargo run --release -p fewgrain
//! --example <name>`); the `fewgrain` binary exposes the same pipeline as
//! subcommands for batch experiments.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod fewshot;
pub mod focusarea;
pub mod highorder;
pub mod losses;
pub mod nn;
pub mod plots;
pub mod synth;
pub mod train;
pub mod types;

pub use config::{ClassifierKind, FusionMode, RunConfig};
pub use error::{Error, Result};
pub use types::{Embedding, Episode, FeatureMap, LabeledImage, Split};
