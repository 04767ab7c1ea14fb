//! Directional effect of the neighbor-penalty weight: train the shallow
//! backbone on 10 base texture classes with beta = 0 (plain center loss)
//! and beta = 0.5 (center-neighbor loss), then compare 5-way 5-shot
//! accuracy on the 10 held-out novel classes, averaged over seeds.
//!
//! ```text
//! cargo run --release -p fewgrain --example beta_ablation [seeds] [epochs]
//! ```

use fewgrain::backbone::{BackboneModel, ClassifierHead};
use fewgrain::config::RunConfig;
use fewgrain::episodes::{run_episodic, sample_episode_items, Protocol, StandardClassifier};
use fewgrain::nn::seeded_stream;
use fewgrain::synth::texture_dataset;
use fewgrain::train::{train_base, LossKind, TrainOptions};
use fewgrain::types::{Embedding, Episode};

fn novel_accuracy(seed: u64, beta: f64, epochs: usize) -> fewgrain::Result<f64> {
    let config = RunConfig {
        seed,
        beta,
        loss_mix: 0.02,
        order: 1,
        image_size_aux: 64,
        ..RunConfig::default()
    };
    let data = texture_dataset(20, 30, 64, 1000 + seed);
    let by_class = data.by_class();
    // Base/novel split of the 20 texture classes, seeded.
    let mut class_ids: Vec<usize> = (0..20).collect();
    let mut split_rng = seeded_stream(seed, "beta/split");
    fewgrain::nn::shuffle(&mut class_ids, &mut split_rng);
    let (base_ids, novel_ids) = class_ids.split_at(10);

    let mut train = Vec::new();
    for (label, &c) in base_ids.iter().enumerate() {
        for &i in &by_class[c] {
            let mut img = data.images[i].clone();
            img.label = Some(label);
            train.push(img);
        }
    }
    let mut model = BackboneModel::build("shallow4", &config)?;
    let mut rng = seeded_stream(config.seed, "head");
    let mut head = ClassifierHead::init(10, model.embedding_dim(), &mut rng);
    let opts = TrainOptions {
        epochs,
        batch_classes: 5,
        batch_per_class: 8,
        loss: LossKind::CenterNeighbor,
        base_lr: 1e-3,
    };
    train_base(&mut model, &mut head, &train, &[], &config, &opts)?;

    // Embed the novel classes once.
    let mut pools: Vec<(usize, Vec<Embedding>)> = Vec::new();
    for &c in novel_ids {
        let images: Vec<_> = by_class[c].iter().map(|&i| data.images[i].clone()).collect();
        let mut embeddings = Vec::new();
        for chunk in images.chunks(32) {
            let (_, z) = model.forward(chunk)?;
            embeddings.extend(z);
        }
        pools.push((c, embeddings));
    }
    let mut ep_rng = seeded_stream(seed, "beta/episodes");
    let episodes: Vec<Episode<_>> = (0..60)
        .map(|_| sample_episode_items(&pools, 5, 5, 10, &mut ep_rng))
        .collect::<fewgrain::Result<_>>()?;
    let report = run_episodic(
        &StandardClassifier(config.classifier),
        &episodes,
        Protocol::Episodic,
    )?;
    Ok(report.mean_acc)
}

fn main() -> fewgrain::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let epochs: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(10);
    let mut mean = [0.0f64; 2];
    println!("seed  beta=0.0  beta=0.5");
    for seed in 0..seeds {
        let t0 = std::time::Instant::now();
        let a0 = novel_accuracy(seed, 0.0, epochs)?;
        let a5 = novel_accuracy(seed, 0.5, epochs)?;
        mean[0] += a0;
        mean[1] += a5;
        println!(
            "{seed:>4}  {:>7.2}%  {:>7.2}%   ({:.0}s)",
            a0 * 100.0,
            a5 * 100.0,
            t0.elapsed().as_secs_f64()
        );
    }
    mean[0] /= seeds as f64;
    mean[1] /= seeds as f64;
    println!("mean  {:>7.2}%  {:>7.2}%", mean[0] * 100.0, mean[1] * 100.0);
    println!(
        "\nneighbor penalty (beta=0.5) {} plain center loss (beta=0) on novel classes",
        if mean[1] >= mean[0] { "matches or beats" } else { "trails" }
    );
    Ok(())
}
