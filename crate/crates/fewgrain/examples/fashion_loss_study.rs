//! Train the small CNN on Fashion-MNIST under the three supervision modes
//! (softmax only, +center, +center-neighbor) and print the test accuracy
//! of each, reproducing the loss-function comparison.
//!
//! Needs the four Fashion-MNIST IDX files in `data/fashion-mnist` (or set
//! `FEWGRAIN_DATA` to a directory containing `fashion-mnist/`). Usage:
//!
//! ```text
//! cargo run --release -p fewgrain --example fashion_loss_study [epochs] [lambda] [modes] [per-class]
//! ```
//!
//! `modes` is a comma list from {softmax, center, cn} (default all three);
//! `lambda` is the CN mixing weight (default 0.0002); `per-class` caps the
//! training images per class (default 0 = use all 6000).

use fewgrain::backbone::{BackboneModel, ClassifierHead};
use fewgrain::config::RunConfig;
use fewgrain::dataset::{load_fashion_mnist, resize_standardize, standardize_in_memory};
use fewgrain::nn::seeded_stream;
use fewgrain::train::{train_base, LossKind, TrainOptions};

fn data_dir() -> std::path::PathBuf {
    std::env::var("FEWGRAIN_DATA")
        .map(|d| std::path::PathBuf::from(d).join("fashion-mnist"))
        .unwrap_or_else(|_| std::path::PathBuf::from("data/fashion-mnist"))
}

fn main() -> fewgrain::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(15);
    let lambda: f64 = std::env::args()
        .nth(2)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0.0002);
    let modes: Vec<String> = std::env::args()
        .nth(3)
        .unwrap_or_else(|| "softmax,center,cn".into())
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let per_class: usize = std::env::args()
        .nth(4)
        .and_then(|a| a.parse().ok())
        .unwrap_or(0);
    let dir = data_dir();
    if !dir.join("train-images-idx3-ubyte.gz").is_file()
        && !dir.join("train-images-idx3-ubyte").is_file()
    {
        eprintln!(
            "Fashion-MNIST not found under {}; download the four IDX files from the \
             zalandoresearch/fashion-mnist repository first.",
            dir.display()
        );
        std::process::exit(3);
    }
    let started = std::time::Instant::now();
    let fashion = load_fashion_mnist(&dir)?;
    let stats = standardize_in_memory(&fashion.train.images);
    let mut train: Vec<_> = fashion
        .train
        .images
        .iter()
        .map(|i| resize_standardize(i, 28, &stats))
        .collect::<fewgrain::Result<_>>()?;
    if per_class > 0 {
        let mut kept = Vec::new();
        let mut counts = [0usize; 10];
        for img in train {
            let label = img.label.unwrap();
            if counts[label] < per_class {
                counts[label] += 1;
                kept.push(img);
            }
        }
        train = kept;
    }
    let test: Vec<_> = fashion
        .test
        .images
        .iter()
        .map(|i| resize_standardize(i, 28, &stats))
        .collect::<fewgrain::Result<_>>()?;
    println!(
        "loaded {} train / {} test images in {:.1}s",
        train.len(),
        test.len(),
        started.elapsed().as_secs_f64()
    );

    let mut results = Vec::new();
    for (name, loss) in [
        ("softmax", LossKind::Softmax),
        ("center", LossKind::Center),
        ("cn", LossKind::CenterNeighbor),
    ] {
        if !modes.iter().any(|m| m == name) {
            continue;
        }
        let config = RunConfig {
            beta: 0.5,
            loss_mix: lambda,
            seed: 0,
            ..RunConfig::default()
        };
        let mut model = BackboneModel::build("mnist", &config)?;
        let mut rng = seeded_stream(config.seed, "head");
        let mut head = ClassifierHead::init(10, model.embedding_dim(), &mut rng);
        let opts = TrainOptions {
            epochs,
            batch_classes: 10,
            batch_per_class: 8,
            loss,
            base_lr: 1e-3,
        };
        let t0 = std::time::Instant::now();
        let (log, _) = train_base(&mut model, &mut head, &train, &test, &config, &opts)?;
        if let Ok(dir) = std::env::var("FEWGRAIN_RUNS") {
            let _ = std::fs::create_dir_all(&dir);
            let _ = std::fs::write(format!("{dir}/fashion-{name}.csv"), log.to_csv());
        }
        let acc = log.epochs.last().map(|e| e.acc_base_val).unwrap_or(0.0);
        println!(
            "{name:>8}: test accuracy {:.2}% after {epochs} epochs ({:.0}s)",
            acc * 100.0,
            t0.elapsed().as_secs_f64()
        );
        results.push((name, acc));
    }
    println!("\nloss function  accuracy");
    for (name, acc) in &results {
        println!("{name:>12}  {:.2}%", acc * 100.0);
    }
    Ok(())
}
