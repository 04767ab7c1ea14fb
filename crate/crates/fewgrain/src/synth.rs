//! Synthetic datasets: Gaussian blob images (linearly separable sanity
//! checks) and parameterized texture gratings (a controllable fine-grained
//! task where class differences are small orientation/frequency shifts).

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::dataset::LoadedDataset;
use crate::error::Result;
use crate::nn::{normal, seeded_stream, uniform};
use crate::types::{LabeledImage, Split};

/// Grayscale blob images: each class is a Gaussian bump at a class-specific
/// location with mild jitter and pixel noise. Nearest class centroid on raw
/// pixels already separates these, which makes them a training oracle.
pub fn blob_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    noise: f64,
    seed: u64,
) -> LoadedDataset {
    let mut rng = seeded_stream(seed, "synth/blobs");
    let mut images = Vec::with_capacity(classes * per_class);
    let radius = size as f64 * 0.3;
    let sigma = size as f64 / 7.0;
    for c in 0..classes {
        let angle = std::f64::consts::TAU * c as f64 / classes as f64;
        let cy = size as f64 / 2.0 + radius * angle.sin();
        let cx = size as f64 / 2.0 + radius * angle.cos();
        for i in 0..per_class {
            let jy = cy + normal(&mut rng) * 1.0;
            let jx = cx + normal(&mut rng) * 1.0;
            let mut pixels = Array3::<f32>::zeros((size, size, 1));
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - jy).powi(2) + (x as f64 - jx).powi(2);
                    let v = 0.9 * (-d2 / (2.0 * sigma * sigma)).exp()
                        + noise * normal(&mut rng);
                    pixels[(y, x, 0)] = v.clamp(0.0, 1.0) as f32;
                }
            }
            images.push(
                LabeledImage::new(pixels, Some(c), format!("blob/{c}/{i}"), Split::Base)
                    .expect("valid synthetic image"),
            );
        }
    }
    LoadedDataset {
        images,
        class_names: (0..classes).map(|c| format!("blob{c:02}")).collect(),
    }
}

/// Texture parameters of one grating class.
#[derive(Debug, Clone, Copy)]
pub struct TextureClass {
    pub orientation: f64,
    pub frequency: f64,
}

/// The class grid used by [`texture_dataset`]: orientations and spatial
/// frequencies interleaved so adjacent class ids differ in one parameter.
pub fn texture_grid(classes: usize) -> Vec<TextureClass> {
    let orient_steps = (classes as f64).sqrt().ceil() as usize;
    let freq_steps = classes.div_ceil(orient_steps);
    let mut params = Vec::with_capacity(classes);
    'outer: for oi in 0..orient_steps {
        for fi in 0..freq_steps {
            if params.len() == classes {
                break 'outer;
            }
            params.push(TextureClass {
                orientation: std::f64::consts::PI * (oi as f64 + 0.3) / orient_steps as f64,
                frequency: 3.0 + 2.0 * fi as f64,
            });
        }
    }
    params
}

/// RGB grating images: class identity is a (orientation, frequency) pair;
/// phase, contrast, tint, and pixel noise vary per image. A second, faint
/// harmonic grating carries part of the class signal so embeddings benefit
/// from structure beyond raw intensity.
pub fn texture_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> LoadedDataset {
    let params = texture_grid(classes);
    let mut rng = seeded_stream(seed, "synth/textures");
    let mut images = Vec::with_capacity(classes * per_class);
    for (c, p) in params.iter().enumerate() {
        let (sin_t, cos_t) = p.orientation.sin_cos();
        for i in 0..per_class {
            let phase = std::f64::consts::TAU * uniform(&mut rng);
            let contrast = 0.4 + 0.4 * uniform(&mut rng);
            let tint: [f64; 3] = [
                0.7 + 0.3 * uniform(&mut rng),
                0.7 + 0.3 * uniform(&mut rng),
                0.7 + 0.3 * uniform(&mut rng),
            ];
            let noise = 0.08;
            let mut pixels = Array3::<f32>::zeros((size, size, 3));
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * cos_t + y as f64 * sin_t) / size as f64;
                    let base = (std::f64::consts::TAU * p.frequency * u + phase).sin();
                    let harmonic =
                        0.3 * (2.0 * std::f64::consts::TAU * p.frequency * u + 2.0 * phase).sin();
                    let v = 0.5 + 0.5 * contrast * (base + harmonic) / 1.3;
                    for ch in 0..3 {
                        let noisy = v * tint[ch] + noise * normal(&mut rng);
                        pixels[(y, x, ch)] = noisy.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            images.push(
                LabeledImage::new(pixels, Some(c), format!("texture/{c}/{i}"), Split::Base)
                    .expect("valid synthetic image"),
            );
        }
    }
    LoadedDataset {
        images,
        class_names: (0..classes).map(|c| format!("texture{c:02}")).collect(),
    }
}

/// Materialize a dataset as a class-per-directory PNG tree (the layout
/// [`crate::dataset::scan_dataset`] expects).
pub fn write_image_tree(dataset: &LoadedDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let mut counters = vec![0usize; dataset.class_names.len()];
    for img in &dataset.images {
        let label = img.label.expect("synthetic images are labeled");
        let dir = root.join(&dataset.class_names[label]);
        fs::create_dir_all(&dir)?;
        let (h, w, chans) = img.pixels.dim();
        let path = dir.join(format!("img{:04}.png", counters[label]));
        counters[label] += 1;
        if chans == 1 {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([(img.pixels[(y as usize, x as usize, 0)] * 255.0) as u8])
            });
            buf.save(&path)
                .map_err(|e| crate::error::Error::Data(format!("{}: {e}", path.display())))?;
        } else {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    (img.pixels[(y as usize, x as usize, 0)] * 255.0) as u8,
                    (img.pixels[(y as usize, x as usize, 1)] * 255.0) as u8,
                    (img.pixels[(y as usize, x as usize, 2)] * 255.0) as u8,
                ])
            });
            buf.save(&path)
                .map_err(|e| crate::error::Error::Data(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}
