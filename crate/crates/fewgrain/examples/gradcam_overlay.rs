//! Train a small CNN on synthetic blob images, compute a Grad-CAM heatmap
//! for one of them, and write the overlay PNG plus focus-region sidecar.
//! The blob images make the localization visually obvious: the heatmap
//! should concentrate on the class's blob position.
//!
//! ```text
//! cargo run --release -p fewgrain --example gradcam_overlay [out-dir]
//! ```

use fewgrain::backbone::{BackboneModel, ClassifierHead};
use fewgrain::config::RunConfig;
use fewgrain::focusarea::{export_heatmap, extract_region, grad_cam, CamClass};
use fewgrain::nn::seeded_stream;
use fewgrain::synth::blob_dataset;
use fewgrain::train::{train_base, LossKind, TrainOptions};

fn main() -> fewgrain::Result<()> {
    let out_dir = std::env::args().nth(1).unwrap_or_else(|| "runs/gradcam-demo".into());
    std::fs::create_dir_all(&out_dir)?;
    let config = RunConfig {
        seed: 3,
        ..RunConfig::default()
    };
    let data = blob_dataset(3, 40, 28, 0.05, config.seed);
    let mut model = BackboneModel::build("mnist", &config)?;
    let mut rng = seeded_stream(config.seed, "head");
    let mut head = ClassifierHead::init(3, model.embedding_dim(), &mut rng);
    let opts = TrainOptions {
        epochs: 12,
        batch_classes: 3,
        batch_per_class: 10,
        loss: LossKind::CenterNeighbor,
        base_lr: 1e-3,
    };
    println!("training the small CNN on 3 blob classes...");
    let (log, _) = train_base(&mut model, &mut head, &data.images, &data.images, &config, &opts)?;
    println!(
        "train accuracy {:.1}%",
        log.epochs.last().unwrap().acc_base_val * 100.0
    );

    for (i, img) in data.images.iter().step_by(40).enumerate() {
        // Auto class: the pseudo-label rule used for novel images.
        let hm = grad_cam(&model, &head, img, CamClass::Auto)?;
        let region = extract_region(&hm, img, config.threshold, &config)?;
        let path = std::path::Path::new(&out_dir).join(format!("blob{i}.png"));
        export_heatmap(img, &hm, &region, config.threshold, &path)?;
        println!(
            "class {} (true {:?}): bbox {:?} -> {}",
            hm.class_used,
            img.label,
            region.bbox,
            path.display()
        );
    }
    Ok(())
}
