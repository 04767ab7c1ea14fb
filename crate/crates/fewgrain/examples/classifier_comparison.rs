//! Compare the four few-shot heads (cosine, nearest-prototype, SVM,
//! imprinting) on the same synthetic episodes.
//!
//! ```text
//! cargo run --release -p fewgrain --example classifier_comparison
//! ```

use fewgrain::config::ClassifierKind;
use fewgrain::episodes::{run_episodic, sample_episode_items, Protocol, StandardClassifier};
use fewgrain::nn::{normal, seeded_stream};
use fewgrain::types::{Embedding, Episode};
use ndarray::Array1;

fn main() -> fewgrain::Result<()> {
    // Synthetic embedding classes: unit-ish Gaussian clusters around random
    // directions, with enough overlap that the heads can disagree.
    let mut rng = seeded_stream(11, "example/classifiers");
    let d = 16;
    let mut pools = Vec::new();
    for c in 0..8 {
        let center: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let items: Vec<Embedding> = (0..30)
            .map(|_| {
                Embedding::new(Array1::from_shape_fn(d, |j| {
                    center[j] + normal(&mut rng) * 1.4
                }))
                .expect("finite")
            })
            .collect();
        pools.push((c, items));
    }
    let mut episode_rng = seeded_stream(11, "episodes");
    let episodes: Vec<Episode<Embedding>> = (0..50)
        .map(|_| sample_episode_items(&pools, 5, 5, 10, &mut episode_rng))
        .collect::<fewgrain::Result<_>>()?;

    println!("classifier          accuracy   ci95");
    for kind in [
        ClassifierKind::Cosine,
        ClassifierKind::NearestPrototype,
        ClassifierKind::Svm,
        ClassifierKind::Imprint,
    ] {
        let report = run_episodic(&StandardClassifier(kind), &episodes, Protocol::Episodic)?;
        println!(
            "{:<18} {:>7.2}%  {:>5.2}%",
            kind.to_string(),
            report.mean_acc * 100.0,
            report.ci95 * 100.0
        );
    }
    Ok(())
}
