//! The focus-area pipeline on one image: heatmap, thresholded bounding
//! box, crop, and both fusion modes (element-sum and shallow-concat).
//!
//! ```text
//! cargo run --release -p fewgrain --example focus_fusion
//! ```

use fewgrain::backbone::{BackboneModel, ClassifierHead};
use fewgrain::config::{FusionMode, RunConfig};
use fewgrain::focusarea::{extract_region, fuse, grad_cam, CamClass};
use fewgrain::nn::seeded_stream;
use fewgrain::synth::texture_dataset;
use fewgrain::train::{train_base, LossKind, TrainOptions};

fn main() -> fewgrain::Result<()> {
    let config = RunConfig {
        seed: 9,
        image_size_aux: 64,
        fusion_mode: FusionMode::ElementSum,
        ..RunConfig::default()
    };
    let data = texture_dataset(6, 20, 64, config.seed);
    let train: Vec<_> = data
        .images
        .iter()
        .filter(|i| i.label.unwrap() < 4)
        .cloned()
        .collect();

    let mut model = BackboneModel::build("shallow4", &config)?;
    let mut rng = seeded_stream(config.seed, "head");
    let mut head = ClassifierHead::init(4, model.embedding_dim(), &mut rng);
    let opts = TrainOptions {
        epochs: 6,
        batch_classes: 4,
        batch_per_class: 8,
        loss: LossKind::CenterNeighbor,
        base_lr: 1e-3,
    };
    println!("training shallow4 on 4 base texture classes...");
    train_base(&mut model, &mut head, &train, &[], &config, &opts)?;

    // A novel-class image: the heatmap class comes from the pseudo-label.
    let novel = data
        .images
        .iter()
        .find(|i| i.label.unwrap() == 5)
        .unwrap()
        .clone();
    let hm = grad_cam(&model, &head, &novel, CamClass::Auto)?;
    println!(
        "novel image pseudo-labeled as base class {}; heatmap degenerate: {}",
        hm.class_used, hm.degenerate
    );
    let region = extract_region(&hm, &novel, config.threshold, &config)?;
    println!("focus bbox {:?} (degenerate {})", region.bbox, region.degenerate);

    let fused = fuse(&model, None, &novel, &region, FusionMode::ElementSum)?;
    println!("element-sum embedding: {} dims", fused.dim());

    // Shallow-concat needs an aux model at the aux size; reuse the same
    // architecture as a stand-in aux here.
    let mut concat_config = config.clone();
    concat_config.fusion_mode = FusionMode::ShallowConcat;
    let aux_region = extract_region(&hm, &novel, config.threshold, &concat_config)?;
    let aux = BackboneModel::build("shallow4", &concat_config)?;
    let concat = fuse(&model, Some(&aux), &novel, &aux_region, FusionMode::ShallowConcat)?;
    println!(
        "shallow-concat embedding: {} dims ({} main + {} aux)",
        concat.dim(),
        fused.dim(),
        concat.dim() - fused.dim()
    );
    Ok(())
}
