//! Weight imprinting: extend a trained base head with novel-class rows
//! built from normalized support means, then score queries over the joint
//! base+novel label space.
//!
//! ```text
//! cargo run --release -p fewgrain --example weight_imprinting
//! ```

use fewgrain::backbone::ClassifierHead;
use fewgrain::fewshot::{imprint, imprinted_scores};
use fewgrain::nn::{normal, seeded_stream};
use fewgrain::types::Embedding;
use ndarray::{Array1, Array2};

fn cluster(center: &[f64], rng: &mut impl rand::RngCore, spread: f64) -> Embedding {
    Embedding::new(Array1::from_shape_fn(center.len(), |j| {
        center[j] + normal(rng) * spread
    }))
    .expect("finite")
}

fn main() -> fewgrain::Result<()> {
    let mut rng = seeded_stream(5, "example/imprint");
    let d = 12;

    // A "trained" base head: 4 well-separated class directions.
    let base_centers: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..d).map(|_| normal(&mut rng) * 3.0).collect())
        .collect();
    let mut weight = Array2::<f64>::zeros((4, d));
    for (i, c) in base_centers.iter().enumerate() {
        for (j, &v) in c.iter().enumerate() {
            weight[(i, j)] = v;
        }
    }
    let head = ClassifierHead { weight, bias: None };

    // Two novel classes with 5 support embeddings each.
    let novel_centers: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..d).map(|_| normal(&mut rng) * 3.0).collect())
        .collect();
    let mut support = Vec::new();
    for (c, center) in novel_centers.iter().enumerate() {
        for _ in 0..5 {
            support.push((cluster(center, &mut rng, 0.4), c));
        }
    }
    let joint = imprint(&head, &support)?;
    println!(
        "imprinted head: {} base rows + {} novel rows, all unit norm",
        joint.base_classes,
        joint.weight.dim().0 - joint.base_classes
    );

    // Queries from one base class and one novel class.
    let mut correct = 0;
    let mut total = 0;
    for (label, center) in base_centers
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.clone()))
        .chain(novel_centers.iter().enumerate().map(|(i, c)| (4 + i, c.clone())))
    {
        for _ in 0..20 {
            let q = cluster(&center, &mut rng, 0.4);
            let (pred, _) = imprinted_scores(&joint, &q)?;
            if pred == label {
                correct += 1;
            }
            total += 1;
        }
    }
    println!(
        "joint base+novel accuracy on clustered queries: {:.1}% ({correct}/{total})",
        100.0 * correct as f64 / total as f64
    );
    Ok(())
}
