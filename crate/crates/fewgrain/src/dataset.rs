//! Dataset loading and preprocessing: directory scanning, deterministic
//! base/novel splits, the manifest file format, per-channel standardization
//! statistics, and the Fashion-MNIST IDX loader.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{sample_without_replacement, seeded_stream};
use crate::types::{LabeledImage, Split};

/// Per-class split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSplit {
    Base,
    Novel,
}

/// One class of a scanned dataset.
#[derive(Debug, Clone)]
pub struct ManifestClass {
    pub name: String,
    pub split: ClassSplit,
    /// Image paths relative to the manifest root.
    pub paths: Vec<String>,
}

/// Per-channel standardization statistics, computed over base classes only
/// so novel data cannot influence preprocessing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Identity statistics: standardization leaves pixels unchanged.
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Stable fingerprint recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.mean.iter().chain(self.std.iter()) {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// A scanned dataset: ordered classes, their files, and the split.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted lexicographically by class name; names are unique.
    pub classes: Vec<ManifestClass>,
    pub stats: Option<ChannelStats>,
}

impl DatasetManifest {
    pub fn base_classes(&self) -> Vec<usize> {
        self.indices(ClassSplit::Base)
    }

    pub fn novel_classes(&self) -> Vec<usize> {
        self.indices(ClassSplit::Novel)
    }

    fn indices(&self, split: ClassSplit) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Absolute path of one image.
    pub fn image_path(&self, class: usize, item: usize) -> PathBuf {
        self.root.join(&self.classes[class].paths[item])
    }

    /// Check the split invariants: disjoint and covering by construction,
    /// plus unique class names.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(&c.name) {
                return Err(Error::Data(format!("duplicate class name `{}`", c.name)));
            }
            if c.paths.is_empty() {
                return Err(Error::Data(format!("class `{}` has no images", c.name)));
            }
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Scan a class-per-directory tree. Classes are sorted lexicographically;
/// files that fail to decode are skipped and counted as warnings. Every
/// class starts on the base side until [`make_split`] assigns the split.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<(DatasetManifest, usize)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Data(format!("`{}` is not a directory", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "`{}` contains no class directories",
            root.display()
        )));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut warnings = 0usize;
    for dir in class_dirs {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("unreadable directory name under {root:?}")))?
            .to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        let mut paths = Vec::with_capacity(files.len());
        for file in files {
            match image::ImageReader::open(&file).map_err(Error::Io).and_then(|r| {
                r.decode()
                    .map_err(|e| Error::Data(format!("{}: {e}", file.display())))
            }) {
                Ok(_) => {
                    let rel = file
                        .strip_prefix(root)
                        .unwrap_or(&file)
                        .to_string_lossy()
                        .replace('\\', "/");
                    paths.push(rel);
                }
                Err(_) => warnings += 1,
            }
        }
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "class directory `{}` has no decodable images",
                dir.display()
            )));
        }
        classes.push(ManifestClass {
            name,
            split: ClassSplit::Base,
            paths,
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        stats: None,
    };
    manifest.validate()?;
    Ok((manifest, warnings))
}

/// Assign exactly `n_base` classes to the base side, the rest novel.
/// The assignment is a pure function of `(manifest class names, n_base,
/// seed)`.
pub fn make_split(manifest: &DatasetManifest, n_base: usize, seed: u64) -> Result<DatasetManifest> {
    let total = manifest.classes.len();
    if n_base < 1 || n_base >= total {
        return Err(Error::Config(format!(
            "n_base must lie in [1, {}), got {n_base}",
            total
        )));
    }
    let mut rng = seeded_stream(seed, "split");
    let base: BTreeSet<usize> =
        sample_without_replacement(total, n_base, &mut rng).into_iter().collect();
    let mut out = manifest.clone();
    for (i, class) in out.classes.iter_mut().enumerate() {
        class.split = if base.contains(&i) {
            ClassSplit::Base
        } else {
            ClassSplit::Novel
        };
    }
    Ok(out)
}

const MANIFEST_HEADER: &str = "fewgrain-manifest v1";

/// Serialize a manifest to the versioned text format.
pub fn manifest_to_string(manifest: &DatasetManifest) -> String {
    let mut s = String::new();
    s.push_str(MANIFEST_HEADER);
    s.push('\n');
    for class in &manifest.classes {
        let split = match class.split {
            ClassSplit::Base => "base",
            ClassSplit::Novel => "novel",
        };
        s.push_str(&format!("{}\t{}\t{}\n", class.name, split, class.paths.join(",")));
    }
    if let Some(stats) = &manifest.stats {
        s.push_str(&format!(
            "#stats mean={},{},{} std={},{},{}\n",
            stats.mean[0], stats.mean[1], stats.mean[2], stats.std[0], stats.std[1], stats.std[2]
        ));
    }
    s
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), manifest_to_string(manifest))?;
    Ok(())
}

/// Parse a manifest file; `root` is the directory the relative paths are
/// resolved against.
pub fn read_manifest(path: impl AsRef<Path>, root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "bad manifest header {:?}, expected `{MANIFEST_HEADER}`",
                other.unwrap_or("")
            )))
        }
    }
    let mut classes = Vec::new();
    let mut stats = None;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#stats ") {
            stats = Some(parse_stats(rest)?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (name, split, paths) = match (parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(s), Some(p)) => (n, s, p),
            _ => return Err(Error::Data(format!("malformed manifest line: {line}"))),
        };
        let split = match split {
            "base" => ClassSplit::Base,
            "novel" => ClassSplit::Novel,
            other => return Err(Error::Data(format!("unknown split `{other}`"))),
        };
        classes.push(ManifestClass {
            name: name.to_string(),
            split,
            paths: paths.split(',').map(|p| p.to_string()).collect(),
        });
    }
    let manifest = DatasetManifest {
        root: root.as_ref().to_path_buf(),
        classes,
        stats,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn parse_stats(rest: &str) -> Result<ChannelStats> {
    let mut mean = [0.0f64; 3];
    let mut std = [1.0f64; 3];
    for part in rest.split_whitespace() {
        let (key, vals) = part
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("bad stats field `{part}`")))?;
        let nums: Vec<f64> = vals
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad stats value `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if nums.len() != 3 {
            return Err(Error::Data("stats need 3 channel values".into()));
        }
        match key {
            "mean" => mean.copy_from_slice(&nums),
            "std" => std.copy_from_slice(&nums),
            other => return Err(Error::Data(format!("unknown stats key `{other}`"))),
        }
    }
    Ok(ChannelStats { mean, std })
}

/// Decode one image file into `[0, 1]` RGB pixels.
pub fn load_image(path: impl AsRef<Path>) -> Result<LabeledImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(Error::Io)?
        .decode()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(y as usize, x as usize, c)] = p.0[c] as f32 / 255.0;
        }
    }
    LabeledImage::new(pixels, None, path.to_string_lossy(), Split::Base)
}

/// Compute per-channel mean/std over every image of the base classes.
pub fn compute_stats(manifest: &DatasetManifest) -> Result<ChannelStats> {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0.0f64;
    for &ci in &manifest.base_classes() {
        for item in 0..manifest.classes[ci].paths.len() {
            let img = load_image(manifest.image_path(ci, item))?;
            let (h, w, chans) = img.pixels.dim();
            for y in 0..h {
                for x in 0..w {
                    for c in 0..chans {
                        let v = img.pixels[(y, x, c)] as f64;
                        sum[c] += v;
                        sum_sq[c] += v * v;
                    }
                }
            }
            count += (h * w) as f64;
        }
    }
    if count == 0.0 {
        return Err(Error::Data("no base images to compute stats from".into()));
    }
    let mut mean = [0.0f64; 3];
    let mut std = [1.0f64; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count;
        let var = (sum_sq[c] / count - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt().max(1e-6);
    }
    Ok(ChannelStats { mean, std })
}

/// Resize target for [`preprocess`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Main,
    Aux,
}

/// Corner-aligned bilinear resize of one `(H, W)` plane.
pub fn bilinear_resize_plane(src: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::<f32>::zeros((oh, ow));
    let sy = if oh > 1 { (h - 1) as f32 / (oh - 1) as f32 } else { 0.0 };
    let sx = if ow > 1 { (w - 1) as f32 / (ow - 1) as f32 } else { 0.0 };
    for oy in 0..oh {
        let fy = if oh > 1 { oy as f32 * sy } else { (h - 1) as f32 / 2.0 };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f32;
        for ox in 0..ow {
            let fx = if ow > 1 { ox as f32 * sx } else { (w - 1) as f32 / 2.0 };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f32;
            let top = src[(y0, x0)] * (1.0 - dx) + src[(y0, x1)] * dx;
            let bottom = src[(y1, x0)] * (1.0 - dx) + src[(y1, x1)] * dx;
            out[(oy, ox)] = top * (1.0 - dy) + bottom * dy;
        }
    }
    out
}

/// Corner-aligned bilinear resize of an `(H, W, C)` image.
pub fn bilinear_resize(src: &Array3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (_, _, chans) = src.dim();
    let mut out = Array3::<f32>::zeros((oh, ow, chans));
    for c in 0..chans {
        let plane = src.index_axis(ndarray::Axis(2), c).to_owned();
        let resized = bilinear_resize_plane(&plane, oh, ow);
        out.index_axis_mut(ndarray::Axis(2), c).assign(&resized);
    }
    out
}

/// Resize to the configured target size and standardize each channel with
/// the dataset statistics.
pub fn preprocess(
    img: &LabeledImage,
    target: Target,
    config: &RunConfig,
    stats: &ChannelStats,
) -> Result<LabeledImage> {
    let size = match target {
        Target::Main => config.image_size_main,
        Target::Aux => config.image_size_aux,
    };
    resize_standardize(img, size, stats)
}

/// [`preprocess`] with an explicit square size.
pub fn resize_standardize(
    img: &LabeledImage,
    size: usize,
    stats: &ChannelStats,
) -> Result<LabeledImage> {
    let (h, w, chans) = img.pixels.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("zero-area image".into()));
    }
    let mut pixels = if (h, w) == (size, size) {
        img.pixels.clone()
    } else {
        bilinear_resize(&img.pixels, size, size)
    };
    for c in 0..chans {
        let mean = stats.mean[c] as f32;
        let std = stats.std[c] as f32;
        pixels
            .index_axis_mut(ndarray::Axis(2), c)
            .mapv_inplace(|v| (v - mean) / std);
    }
    if !pixels.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite pixels after standardization".into()));
    }
    Ok(LabeledImage {
        pixels,
        label: img.label,
        source_path: img.source_path.clone(),
        split: img.split,
    })
}

/// An in-memory labeled image collection with its class names.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub images: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

impl LoadedDataset {
    /// Image indices grouped by label.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_names.len()];
        for (i, img) in self.images.iter().enumerate() {
            if let Some(label) = img.label {
                groups[label].push(i);
            }
        }
        groups
    }
}

/// Fashion-MNIST train and test splits.
#[derive(Debug, Clone)]
pub struct FashionMnist {
    pub train: LoadedDataset,
    pub test: LoadedDataset,
}

const FASHION_CLASSES: [&str; 10] = [
    "t-shirt-top",
    "trouser",
    "pullover",
    "dress",
    "coat",
    "sandal",
    "shirt",
    "sneaker",
    "bag",
    "ankle-boot",
];

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = path.with_extension("");
    let candidates = [path.to_path_buf(), path.with_extension("gz"), raw];
    for candidate in &candidates {
        if candidate.is_file() {
            let bytes = fs::read(candidate)?;
            if candidate.extension().and_then(|e| e.to_str()) == Some("gz") {
                let mut out = Vec::new();
                flate2::read::GzDecoder::new(&bytes[..])
                    .read_to_end(&mut out)
                    .map_err(|e| Error::Data(format!("{}: {e}", candidate.display())))?;
                return Ok(out);
            }
            return Ok(bytes);
        }
    }
    Err(Error::Data(format!(
        "missing IDX file `{}[.gz]`",
        path.display()
    )))
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < 16 || u32::from_be_bytes(bytes[0..4].try_into().unwrap()) != 2051 {
        return Err(Error::Data(format!("{}: not an IDX3 image file", path.display())));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * h * w {
        return Err(Error::Data(format!("{}: truncated IDX file", path.display())));
    }
    Ok((n, h, w, bytes[16..].to_vec()))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < 8 || u32::from_be_bytes(bytes[0..4].try_into().unwrap()) != 2049 {
        return Err(Error::Data(format!("{}: not an IDX1 label file", path.display())));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Data(format!("{}: truncated IDX file", path.display())));
    }
    Ok(bytes[8..].to_vec())
}

fn idx_to_images(
    images: (usize, usize, usize, Vec<u8>),
    labels: Vec<u8>,
    split: Split,
    tag: &str,
) -> Result<Vec<LabeledImage>> {
    let (n, h, w, data) = images;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{tag}: {n} images but {} labels",
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut pixels = Array3::<f32>::zeros((h, w, 1));
        let base = i * h * w;
        for y in 0..h {
            for x in 0..w {
                pixels[(y, x, 0)] = data[base + y * w + x] as f32 / 255.0;
            }
        }
        out.push(LabeledImage::new(
            pixels,
            Some(labels[i] as usize),
            format!("{tag}/{i}"),
            split,
        )?);
    }
    Ok(out)
}

/// Load Fashion-MNIST from a directory holding the four IDX files
/// (`train-images-idx3-ubyte[.gz]` etc., as distributed upstream).
pub fn load_fashion_mnist(dir: impl AsRef<Path>) -> Result<FashionMnist> {
    let dir = dir.as_ref();
    let train_images = read_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_labels = read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let test_images = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_labels = read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    let class_names: Vec<String> = FASHION_CLASSES.iter().map(|s| s.to_string()).collect();
    Ok(FashionMnist {
        train: LoadedDataset {
            images: idx_to_images(train_images, train_labels, Split::Base, "fashion-train")?,
            class_names: class_names.clone(),
        },
        test: LoadedDataset {
            images: idx_to_images(test_images, test_labels, Split::Base, "fashion-test")?,
            class_names,
        },
    })
}

/// Standardize an in-memory dataset with mean/std computed from a donor
/// set (the training split).
pub fn standardize_in_memory(train: &[LabeledImage]) -> ChannelStats {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0.0f64;
    for img in train {
        let (h, w, chans) = img.pixels.dim();
        for y in 0..h {
            for x in 0..w {
                for c in 0..chans {
                    let v = img.pixels[(y, x, c)] as f64;
                    sum[c] += v;
                    sum_sq[c] += v * v;
                }
            }
        }
        count += (h * w) as f64;
    }
    let mut mean = [0.0f64; 3];
    let mut std = [1.0f64; 3];
    if count > 0.0 {
        let chans = train.first().map(|i| i.channels()).unwrap_or(3);
        for c in 0..chans {
            mean[c] = sum[c] / count;
            let var = (sum_sq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = var.sqrt().max(1e-6);
        }
    }
    ChannelStats { mean, std }
}
