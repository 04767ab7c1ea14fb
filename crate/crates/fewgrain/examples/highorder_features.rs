//! Degree-r interaction maps on a random feature map: shows the rank-1
//! realization (parallel 1x1 convolutions multiplied elementwise), the
//! integrated embedding, and the degree-r homogeneity property.
//!
//! ```text
//! cargo run --release -p fewgrain --example highorder_features
//! ```

use fewgrain::highorder::{degree_r_maps, integrate, HighOrderParams, OrderBank};
use fewgrain::nn::{normal, seeded_stream};
use fewgrain::types::FeatureMap;
use ndarray::Array3;

fn main() -> fewgrain::Result<()> {
    let mut rng = seeded_stream(7, "example/highorder");
    let map = FeatureMap::new(
        Array3::from_shape_fn((8, 6, 6), |_| normal(&mut rng) as f32),
        "demo/features",
    )?;
    println!("input feature map: {} channels, {:?} spatial", map.channels(), map.spatial());

    for order in 1..=3 {
        let bank = OrderBank::init(order, 8, 4, &mut rng);
        let z = degree_r_maps(&map, &bank)?;
        let scaled = FeatureMap::new(map.data.mapv(|v| 2.0 * v), "scaled")?;
        let z2 = degree_r_maps(&scaled, &bank)?;
        let ratio = z2.data[(0, 0, 0)] / z.data[(0, 0, 0)];
        println!(
            "order {order}: interaction map {:?}, scaling the input by 2 scales it by {ratio:.0} (= 2^{order})",
            z.data.dim()
        );
    }

    let params = HighOrderParams::init(2, 8, &[4], &mut rng)?;
    let embedding = integrate(&map, &params)?;
    println!(
        "integrated embedding: {} dims (8 first-order + 4 weighted second-order)",
        embedding.dim()
    );
    println!("values: {:.4?}", embedding.values.to_vec());
    Ok(())
}
