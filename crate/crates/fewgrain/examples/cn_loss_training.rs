//! The center-neighbor loss pieces on a toy batch: center distances, the
//! softmin neighbor penalty, the combined loss, and the center update rule
//! contracting toward the batch means.
//!
//! ```text
//! cargo run --release -p fewgrain --example cn_loss_training
//! ```

use fewgrain::losses::{
    batch_class_means, center_loss, cn_loss, neighbor_penalty, update_centers, CenterState,
};
use fewgrain::types::Embedding;
use ndarray::{array, Array2};

fn emb(v: [f64; 2]) -> Embedding {
    Embedding::new(array![v[0], v[1]]).expect("finite")
}

fn main() -> fewgrain::Result<()> {
    let mut state = CenterState::new(2, 2, 0.5)?;
    state.centers = array![[0.0, 0.0], [0.0, 1.0]];

    let batch = vec![
        (emb([0.5, 0.0]), 0usize),
        (emb([-0.5, 0.0]), 0),
        (emb([0.5, 1.0]), 1),
        (emb([-0.5, 1.0]), 1),
    ];
    let lc = center_loss(&batch, &state)?;
    println!("center loss (1/2 sum of squared center distances): {lc:.4}");

    let z = Array2::from_shape_fn((4, 2), |(i, j)| batch[i].0.values[j]);
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let means = batch_class_means(&z.view(), &labels)?;
    let ln = neighbor_penalty(&means, &state)?;
    println!("neighbor penalty (softmin over center distances): {ln:.4}");

    for beta in [0.0, 0.5, 1.0] {
        let total = cn_loss(&batch, &state, beta)?;
        println!("cn loss at beta={beta}: {total:.4}");
    }

    // The update rule moves each present center gamma_c of the way to the
    // batch mean; repeated updates contract the gap by (1 - gamma_c).
    let mut drifted = state.clone();
    drifted.centers = array![[4.0, -2.0], [3.0, 5.0]];
    println!("\ncenter update trajectory toward batch means:");
    for step in 0..5 {
        let gap0 = (drifted.centers[(0, 0)] - means.means[(0, 0)]).abs();
        println!(
            "  step {step}: centers {:?}, gap to mean {:.4}",
            drifted.centers.row(0).to_vec(),
            gap0
        );
        drifted = update_centers(&batch, &drifted)?;
    }
    Ok(())
}
