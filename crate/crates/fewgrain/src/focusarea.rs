//! Grad-CAM focus-area localization and fusion: channel weights from
//! spatially-averaged score gradients, ReLU-weighted heatmaps, thresholded
//! bounding-box extraction, and whole-image + crop embedding fusion.
//!
//! Novel-class images have no base label; the `Auto` class rule scores the
//! image with the base head and uses the argmax base class as the
//! pseudo-label.

use std::path::Path;

use ndarray::{Array1, Array2, Axis, s};

use crate::backbone::{class_scores, BackboneModel, ClassifierHead};
use crate::config::{FusionMode, RunConfig};
use crate::dataset::{bilinear_resize, bilinear_resize_plane};
use crate::error::{Error, Result};
use crate::types::{Embedding, FeatureMap, LabeledImage};

/// Class selection for the heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamClass {
    /// Use the base head's argmax prediction (the novel-class rule).
    Auto,
    /// A specific base-class index.
    Index(usize),
}

/// A spatial relevance map at feature resolution plus its upsampled,
/// max-normalized image-space form.
#[derive(Debug, Clone)]
pub struct HeatMap {
    /// `(M, N)` nonnegative relevance at feature-map resolution.
    pub raw: Array2<f32>,
    /// `(H, W)` in `[0, 1]`; all zero when degenerate.
    pub upsampled: Array2<f32>,
    /// Base class the map was computed for.
    pub class_used: usize,
    /// Per-channel weights (spatial mean of the score gradient).
    pub alpha: Array1<f32>,
    /// Set when the ReLU zeroes the whole map.
    pub degenerate: bool,
}

/// The crop around the high-relevance region.
#[derive(Debug, Clone)]
pub struct FocusRegion {
    /// `(row0, col0, row1, col1)` inclusive, in image coordinates.
    pub bbox: (usize, usize, usize, usize),
    /// Bbox contents resized to the fusion target size.
    pub crop: LabeledImage,
    pub degenerate: bool,
}

/// Grad-CAM on an explicit feature map, upsampling to `out_hw`.
pub fn grad_cam_map(
    model: &BackboneModel,
    head: &ClassifierHead,
    map: &FeatureMap,
    class: CamClass,
    out_hw: (usize, usize),
) -> Result<HeatMap> {
    let (k, m, n) = map.data.dim();
    let class_used = match class {
        CamClass::Index(c) => {
            if c >= head.classes() {
                return Err(Error::Config(format!(
                    "class {c} out of base-class range 0..{}",
                    head.classes()
                )));
            }
            c
        }
        CamClass::Auto => {
            let (z, _) = model.neck_forward_single(map)?;
            let scores = class_scores(head, &z)?;
            let mut best = 0usize;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = i;
                }
            }
            best
        }
    };

    let grad = model.score_gradient(head, map, class_used)?;
    let z_count = (m * n) as f64;
    let alpha = Array1::from_iter((0..k).map(|ch| {
        let s: f64 = grad.index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum();
        (s / z_count) as f32
    }));

    let mut raw = Array2::<f32>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for ch in 0..k {
                acc += alpha[ch] as f64 * map.data[(ch, i, j)] as f64;
            }
            raw[(i, j)] = (acc.max(0.0)) as f32;
        }
    }
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite heatmap".into()));
    }
    let max = raw.iter().cloned().fold(0.0f32, f32::max);
    let degenerate = max == 0.0;
    let upsampled = if degenerate {
        Array2::zeros(out_hw)
    } else {
        let mut up = bilinear_resize_plane(&raw, out_hw.0, out_hw.1);
        // Upsampling cannot exceed the source max, so dividing by it keeps
        // the map in [0, 1] with max exactly 1 at the peak cell.
        up.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
        up
    };
    Ok(HeatMap {
        raw,
        upsampled,
        class_used,
        alpha,
        degenerate,
    })
}

/// Grad-CAM for one preprocessed image through the deployed model head.
pub fn grad_cam(
    model: &BackboneModel,
    head: &ClassifierHead,
    img: &LabeledImage,
    class: CamClass,
) -> Result<HeatMap> {
    let (maps, _) = model.forward(std::slice::from_ref(img))?;
    let map = maps.into_iter().next().expect("one image in, one map out");
    grad_cam_map(model, head, &map, class, (img.height(), img.width()))
}

/// Tight bounding box of all pixels with upsampled relevance `>= tau`
/// (the map is max-normalized, so the threshold is `tau * max`). The crop
/// is resized to the fusion target: main size for element-sum, aux size
/// for shallow-concat. Degenerate maps yield the full image.
pub fn extract_region(
    hm: &HeatMap,
    img: &LabeledImage,
    tau: f64,
    config: &RunConfig,
) -> Result<FocusRegion> {
    let crop_size = match config.fusion_mode {
        FusionMode::ElementSum => config.image_size_main,
        FusionMode::ShallowConcat => config.image_size_aux,
    };
    extract_region_sized(hm, img, tau, crop_size)
}

/// [`extract_region`] with an explicit crop target size (the fusion
/// model's expected input).
pub fn extract_region_sized(
    hm: &HeatMap,
    img: &LabeledImage,
    tau: f64,
    crop_size: usize,
) -> Result<FocusRegion> {
    let (h, w, _) = img.pixels.dim();
    if hm.upsampled.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "heatmap is {:?} but image is {:?}",
            hm.upsampled.dim(),
            (h, w)
        )));
    }
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::Config("threshold must lie in (0, 1)".into()));
    }

    let (bbox, degenerate) = if hm.degenerate {
        ((0, 0, h - 1, w - 1), true)
    } else {
        let mut r0 = usize::MAX;
        let mut c0 = usize::MAX;
        let mut r1 = 0usize;
        let mut c1 = 0usize;
        let level = tau as f32;
        for y in 0..h {
            for x in 0..w {
                if hm.upsampled[(y, x)] >= level {
                    r0 = r0.min(y);
                    c0 = c0.min(x);
                    r1 = r1.max(y);
                    c1 = c1.max(x);
                }
            }
        }
        if r0 == usize::MAX {
            ((0, 0, h - 1, w - 1), true)
        } else {
            ((r0, c0, r1, c1), false)
        }
    };

    let region = img
        .pixels
        .slice(s![bbox.0..=bbox.2, bbox.1..=bbox.3, ..])
        .to_owned();
    let crop_pixels = bilinear_resize(&region, crop_size, crop_size);
    let crop = LabeledImage {
        pixels: crop_pixels,
        label: img.label,
        source_path: format!("{}#focus", img.source_path),
        split: img.split,
    };
    Ok(FocusRegion {
        bbox,
        crop,
        degenerate,
    })
}

/// Fuse the whole-image and focus-area embeddings.
///
/// Element-sum sends both through the main model and adds; shallow-concat
/// sends the crop through the auxiliary shallow model and concatenates.
pub fn fuse(
    model_main: &BackboneModel,
    model_aux: Option<&BackboneModel>,
    img: &LabeledImage,
    region: &FocusRegion,
    mode: FusionMode,
) -> Result<Embedding> {
    let (_, raw_embed) = model_main.forward(std::slice::from_ref(img))?;
    let raw = raw_embed.into_iter().next().expect("one embedding");
    match mode {
        FusionMode::ElementSum => {
            let (_, crop_embed) = model_main.forward(std::slice::from_ref(&region.crop))?;
            let crop = crop_embed.into_iter().next().expect("one embedding");
            Embedding::new(&raw.values + &crop.values)
        }
        FusionMode::ShallowConcat => {
            let aux = model_aux.ok_or_else(|| {
                Error::Config("shallow-concat fusion requires an auxiliary shallow model".into())
            })?;
            let (_, crop_embed) = aux.forward(std::slice::from_ref(&region.crop))?;
            let crop = crop_embed.into_iter().next().expect("one embedding");
            let mut values = raw.values.to_vec();
            values.extend(crop.values.iter());
            Embedding::new(Array1::from_vec(values))
        }
    }
}

/// Write the blended overlay PNG (image + color-mapped heatmap at 0.5
/// opacity) and a sidecar text file with the bbox, class, and threshold.
pub fn export_heatmap(
    img: &LabeledImage,
    hm: &HeatMap,
    region: &FocusRegion,
    tau: f64,
    png_path: impl AsRef<Path>,
) -> Result<()> {
    let png_path = png_path.as_ref();
    let (h, w, chans) = img.pixels.dim();
    // Rescale pixels for display (inputs may be standardized).
    let lo = img.pixels.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = img.pixels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let gray = |c: usize| (img.pixels[(y, x, c.min(chans - 1))] - lo) / span;
        let base = [gray(0), gray(1), gray(2)];
        let heat = hm.upsampled[(y, x)];
        // Simple black-red-yellow ramp.
        let overlay = [heat.min(1.0), (heat * 2.0 - 1.0).clamp(0.0, 1.0), 0.0];
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = 0.5 * base[c] + 0.5 * overlay[c];
            px[c] = (v.clamp(0.0, 1.0) * 255.0) as u8;
        }
        image::Rgb(px)
    });
    buf.save(png_path)
        .map_err(|e| Error::Data(format!("{}: {e}", png_path.display())))?;
    let sidecar = png_path.with_extension("txt");
    let text = format!(
        "bbox={},{},{},{}\nclass_used={}\ntau={}\ndegenerate={}\n",
        region.bbox.0, region.bbox.1, region.bbox.2, region.bbox.3, hm.class_used, tau,
        region.degenerate
    );
    std::fs::write(sidecar, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Neck;
    use crate::highorder::HighOrderParams;
    use crate::nn::{normal, seeded_stream};
    use crate::types::Split;
    use ndarray::Array3;

    /// Extractor-less model: the "feature map" is the input itself, the
    /// neck is plain GAP, so scores are exactly sum_k w_kc * mean(A^k).
    fn gap_linear_model(k: usize) -> BackboneModel {
        BackboneModel::custom(
            "tiny-gap",
            (k, 4, 4),
            vec![],
            Neck::Gap {
                high: HighOrderParams::first_order(),
            },
        )
    }

    fn random_map(k: usize, m: usize, n: usize, seed: u64) -> FeatureMap {
        let mut rng = seeded_stream(seed, "fa-map");
        FeatureMap::new(
            Array3::from_shape_fn((k, m, n), |_| normal(&mut rng) as f32),
            "t",
        )
        .unwrap()
    }

    #[test]
    fn cam_identity_for_gap_linear_head() {
        // For y^c = sum_k w_kc mean(A^k), alpha_k = w_kc / Z, so the
        // normalized heatmap equals the normalized CAM sum_k w_kc A^k.
        let mut rng = seeded_stream(60, "cam");
        for trial in 0..5 {
            let k = 2 + (trial % 4);
            let model = gap_linear_model(k);
            let head = ClassifierHead::init(3, k, &mut rng);
            let map = random_map(k, 4, 4, 61 + trial as u64);
            let hm = grad_cam_map(&model, &head, &map, CamClass::Index(1), (4, 4)).unwrap();

            let mut cam = Array2::<f64>::zeros((4, 4));
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for ch in 0..k {
                        acc += head.weight[(1, ch)] * map.data[(ch, i, j)] as f64;
                    }
                    cam[(i, j)] = acc.max(0.0);
                }
            }
            let cam_max = cam.iter().cloned().fold(0.0f64, f64::max);
            let hm_max = hm.raw.iter().cloned().fold(0.0f32, f32::max) as f64;
            assert!(cam_max > 0.0 && hm_max > 0.0);
            for (got, want) in hm.raw.iter().zip(cam.iter()) {
                let g = *got as f64 / hm_max;
                let w = want / cam_max;
                assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_gradient_yields_degenerate_map() {
        let model = gap_linear_model(2);
        let mut head = ClassifierHead::init(2, 2, &mut seeded_stream(62, "z"));
        head.weight.row_mut(0).fill(0.0);
        let map = random_map(2, 4, 4, 63);
        let hm = grad_cam_map(&model, &head, &map, CamClass::Index(0), (4, 4)).unwrap();
        assert!(hm.degenerate);
        assert!(hm.raw.iter().all(|&v| v == 0.0));
        assert!(hm.upsampled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_identity() {
        // K=1 with w = Z (so alpha = 1): raw equals the nonnegative map.
        let model = gap_linear_model(1);
        let head = ClassifierHead {
            weight: ndarray::array![[16.0]],
            bias: None,
        };
        let data = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f32 / 10.0);
        let map = FeatureMap::new(data.clone(), "t").unwrap();
        let hm = grad_cam_map(&model, &head, &map, CamClass::Index(0), (4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((hm.raw[(i, j)] - data[(0, i, j)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn auto_class_matches_argmax_scores() {
        let mut rng = seeded_stream(64, "auto");
        let model = gap_linear_model(3);
        let head = ClassifierHead::init(4, 3, &mut rng);
        for trial in 0..10 {
            let map = random_map(3, 4, 4, 70 + trial);
            let hm = grad_cam_map(&model, &head, &map, CamClass::Auto, (4, 4)).unwrap();
            let (z, _) = model.neck_forward_single(&map).unwrap();
            let scores = class_scores(&head, &z).unwrap();
            let mut best = 0usize;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = i;
                }
            }
            assert_eq!(hm.class_used, best);
        }
    }

    #[test]
    fn class_out_of_range_is_error() {
        let model = gap_linear_model(2);
        let head = ClassifierHead::init(2, 2, &mut seeded_stream(65, "r"));
        let map = random_map(2, 4, 4, 66);
        assert!(grad_cam_map(&model, &head, &map, CamClass::Index(5), (4, 4)).is_err());
    }

    fn indicator_heatmap(h: usize, w: usize, r: (usize, usize), c: (usize, usize)) -> HeatMap {
        let mut up = Array2::<f32>::zeros((h, w));
        for y in r.0..=r.1 {
            for x in c.0..=c.1 {
                up[(y, x)] = 1.0;
            }
        }
        HeatMap {
            raw: up.clone(),
            upsampled: up,
            class_used: 0,
            alpha: Array1::zeros(1),
            degenerate: false,
        }
    }

    fn gray_image(h: usize, w: usize) -> LabeledImage {
        LabeledImage::new(
            Array3::from_shape_fn((h, w, 1), |(y, x, _)| ((y + x) % 7) as f32 / 7.0),
            Some(0),
            "img",
            Split::Base,
        )
        .unwrap()
    }

    fn small_cfg() -> RunConfig {
        RunConfig {
            image_size_main: 16,
            image_size_aux: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn indicator_region_bbox() {
        let hm = indicator_heatmap(64, 64, (10, 20), (30, 40));
        let img = gray_image(64, 64);
        let region = extract_region(&hm, &img, 0.5, &small_cfg()).unwrap();
        assert_eq!(region.bbox, (10, 30, 20, 40));
        assert!(!region.degenerate);
        assert_eq!(region.crop.pixels.dim(), (16, 16, 1));
    }

    #[test]
    fn degenerate_heatmap_takes_full_image() {
        let mut hm = indicator_heatmap(32, 32, (0, 0), (0, 0));
        hm.upsampled.fill(0.0);
        hm.raw.fill(0.0);
        hm.degenerate = true;
        let img = gray_image(32, 32);
        let region = extract_region(&hm, &img, 0.5, &small_cfg()).unwrap();
        assert_eq!(region.bbox, (0, 0, 31, 31));
        assert!(region.degenerate);
    }

    #[test]
    fn two_blobs_take_tight_hull() {
        let mut hm = indicator_heatmap(40, 40, (2, 4), (3, 5));
        for y in 30..=33 {
            for x in 20..=22 {
                hm.upsampled[(y, x)] = 1.0;
            }
        }
        let img = gray_image(40, 40);
        let region = extract_region(&hm, &img, 0.5, &small_cfg()).unwrap();
        assert_eq!(region.bbox, (2, 3, 33, 22));
    }

    #[test]
    fn threshold_monotonicity_shrinks_bbox() {
        let mut rng = seeded_stream(67, "mono");
        let mut up = Array2::<f32>::zeros((24, 24));
        for v in up.iter_mut() {
            *v = crate::nn::uniform(&mut rng) as f32;
        }
        up[(7, 9)] = 1.0;
        let hm = HeatMap {
            raw: up.clone(),
            upsampled: up,
            class_used: 0,
            alpha: Array1::zeros(1),
            degenerate: false,
        };
        let img = gray_image(24, 24);
        let cfg = small_cfg();
        let mut prev: Option<(usize, usize, usize, usize)> = None;
        for tau in [0.2, 0.4, 0.6, 0.8] {
            let b = extract_region(&hm, &img, tau, &cfg).unwrap().bbox;
            if let Some(p) = prev {
                assert!(b.0 >= p.0 && b.1 >= p.1 && b.2 <= p.2 && b.3 <= p.3);
            }
            prev = Some(b);
        }
    }

    fn mlp_model(dim: usize, in_dims: (usize, usize, usize), seed: u64) -> BackboneModel {
        let mut rng = seeded_stream(seed, "fuse-mlp");
        let flat = in_dims.0 * in_dims.1 * in_dims.2;
        let w = ndarray::Array2::from_shape_fn((dim, flat), |_| (normal(&mut rng) * 0.1) as f32);
        BackboneModel::custom(
            "tiny-mlp",
            in_dims,
            vec![],
            Neck::Mlp {
                layers: vec![(crate::nn::Linear::new(w, None), false)],
            },
        )
    }

    #[test]
    fn element_sum_on_degenerate_region_doubles_embedding() {
        let cfg = RunConfig {
            image_size_main: 8,
            ..RunConfig::default()
        };
        let model = mlp_model(6, (1, 8, 8), 68);
        let img = gray_image(8, 8);
        let hm = HeatMap {
            raw: Array2::zeros((8, 8)),
            upsampled: Array2::zeros((8, 8)),
            class_used: 0,
            alpha: Array1::zeros(1),
            degenerate: true,
        };
        let region = extract_region(&hm, &img, 0.5, &cfg).unwrap();
        let fused = fuse(&model, None, &img, &region, FusionMode::ElementSum).unwrap();
        let (_, single) = model.forward(std::slice::from_ref(&img)).unwrap();
        let twice = &single[0].values * 2.0;
        for (a, b) in fused.values.iter().zip(twice.iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn element_sum_with_zero_crop_is_identity() {
        let model = gap_linear_model(1);
        let img = LabeledImage::new(
            Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (1 + y + x) as f32 / 8.0),
            None,
            "raw",
            Split::NovelQuery,
        )
        .unwrap();
        let zero_crop = LabeledImage::new(
            Array3::zeros((4, 4, 1)),
            None,
            "zero",
            Split::NovelQuery,
        )
        .unwrap();
        let region = FocusRegion {
            bbox: (0, 0, 3, 3),
            crop: zero_crop,
            degenerate: false,
        };
        let fused = fuse(&model, None, &img, &region, FusionMode::ElementSum).unwrap();
        let (_, single) = model.forward(std::slice::from_ref(&img)).unwrap();
        assert_eq!(fused.values, single[0].values);
    }

    #[test]
    fn shallow_concat_dimension_arithmetic() {
        let cfg = RunConfig {
            image_size_main: 8,
            image_size_aux: 6,
            fusion_mode: FusionMode::ShallowConcat,
            ..RunConfig::default()
        };
        let main = mlp_model(512, (1, 8, 8), 69);
        let aux = mlp_model(64, (1, 6, 6), 70);
        let img = gray_image(8, 8);
        let hm = indicator_heatmap(8, 8, (2, 5), (2, 5));
        let region = extract_region(&hm, &img, 0.5, &cfg).unwrap();
        assert_eq!(region.crop.pixels.dim(), (6, 6, 1));
        let fused = fuse(&main, Some(&aux), &img, &region, FusionMode::ShallowConcat).unwrap();
        assert_eq!(fused.dim(), 576);
        let missing = fuse(&main, None, &img, &region, FusionMode::ShallowConcat);
        assert!(matches!(missing, Err(Error::Config(_))));
    }

    #[test]
    fn alpha_matches_finite_difference_mean() {
        let mut rng = seeded_stream(71, "fd-alpha");
        let model = gap_linear_model(2);
        let head = ClassifierHead::init(2, 2, &mut rng);
        let map = random_map(2, 2, 2, 72);
        let hm = grad_cam_map(&model, &head, &map, CamClass::Index(1), (2, 2)).unwrap();

        let score = |m: &FeatureMap| -> f64 {
            let (z, _) = model.neck_forward_single(m).unwrap();
            class_scores(&head, &z).unwrap()[1]
        };
        let h = 1e-3f32;
        for ch in 0..2 {
            let mut fd_sum = 0.0f64;
            for i in 0..2 {
                for j in 0..2 {
                    let mut mp = map.clone();
                    mp.data[(ch, i, j)] += h;
                    let mut mm = map.clone();
                    mm.data[(ch, i, j)] -= h;
                    fd_sum += (score(&mp) - score(&mm)) / (2.0 * h as f64);
                }
            }
            let fd_alpha = fd_sum / 4.0;
            let an = hm.alpha[ch] as f64;
            assert!((fd_alpha - an).abs() <= 1e-3 * an.abs().max(1.0), "{fd_alpha} vs {an}");
        }
    }

    #[test]
    fn overlay_export_writes_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let img = gray_image(16, 16);
        let hm = indicator_heatmap(16, 16, (4, 8), (5, 9));
        let region = extract_region(&hm, &img, 0.5, &small_cfg()).unwrap();
        let path = dir.path().join("overlay.png");
        export_heatmap(&img, &hm, &region, 0.5, &path).unwrap();
        assert!(path.is_file());
        let sidecar = std::fs::read_to_string(dir.path().join("overlay.txt")).unwrap();
        assert!(sidecar.contains("bbox=4,5,8,9"));
        assert!(sidecar.contains("tau=0.5"));
    }
}
