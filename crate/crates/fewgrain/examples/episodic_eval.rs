//! End-to-end C-way K-shot evaluation on a synthetic fine-grained texture
//! dataset: train the shallow backbone on 10 base classes, then score
//! 5-way 5-shot episodes over the 10 held-out novel classes.
//!
//! ```text
//! cargo run --release -p fewgrain --example episodic_eval
//! ```

use fewgrain::backbone::{BackboneModel, ClassifierHead};
use fewgrain::config::RunConfig;
use fewgrain::episodes::{run_episodic, sample_episode_items, Protocol, StandardClassifier};
use fewgrain::nn::seeded_stream;
use fewgrain::synth::texture_dataset;
use fewgrain::train::{train_base, LossKind, TrainOptions};
use fewgrain::types::Episode;

fn main() -> fewgrain::Result<()> {
    let config = RunConfig {
        seed: 1,
        image_size_aux: 64,
        ..RunConfig::default()
    };
    let size = config.image_size_aux;
    let data = texture_dataset(20, 30, size, config.seed);
    let by_class = data.by_class();

    // First 10 classes are base, the rest novel.
    let mut train = Vec::new();
    for c in 0..10 {
        for &i in &by_class[c] {
            let mut img = data.images[i].clone();
            img.label = Some(c);
            train.push(img);
        }
    }
    let mut model = BackboneModel::build("shallow4", &config)?;
    let mut rng = seeded_stream(config.seed, "head");
    let mut head = ClassifierHead::init(10, model.embedding_dim(), &mut rng);
    let opts = TrainOptions {
        epochs: 10,
        batch_classes: 5,
        batch_per_class: 8,
        loss: LossKind::CenterNeighbor,
        base_lr: 1e-3,
    };
    println!("training shallow4 on 10 base texture classes ({size}x{size})...");
    let (log, _) = train_base(&mut model, &mut head, &train, &[], &config, &opts)?;
    println!("final softmax loss {:.4}", log.epochs.last().unwrap().loss_softmax);

    // Embed all novel images once, then sample episodes over embeddings.
    println!("embedding novel classes...");
    let mut pools = Vec::new();
    for c in 10..20 {
        let mut embeddings = Vec::new();
        for &i in &by_class[c] {
            let (_, z) = model.forward(std::slice::from_ref(&data.images[i]))?;
            embeddings.push(z.into_iter().next().unwrap());
        }
        pools.push((c, embeddings));
    }
    let mut rng = seeded_stream(config.seed, "episodes");
    let episodes: Vec<Episode<_>> = (0..40)
        .map(|_| sample_episode_items(&pools, 5, 5, 10, &mut rng))
        .collect::<fewgrain::Result<_>>()?;
    let report = run_episodic(
        &StandardClassifier(config.classifier),
        &episodes,
        Protocol::Episodic,
    )?;
    println!(
        "5-way 5-shot over {} episodes: {:.2}% +- {:.2}%",
        report.episodes,
        report.mean_acc * 100.0,
        report.ci95 * 100.0
    );
    println!("\nper-class accuracy:");
    for (c, acc) in report.per_class_acc() {
        println!("  texture{c:02}: {:.1}%", acc * 100.0);
    }
    Ok(())
}
