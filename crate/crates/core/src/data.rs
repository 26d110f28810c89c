//! Dataset ingestion, few-shot episode sampling, and preprocessing.
//!
//! Datasets are directory-per-class image folders described by a JSON
//! manifest (name, ordered class list, split directories). Packed archives
//! are converted into this layout rather than read natively, and a synthetic
//! generator produces desk-scale datasets with disjoint ID/OOD clusters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn key(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Id,
    Ood,
}

/// Where a dataset lives and how it participates in a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub root: PathBuf,
    pub split: Split,
    pub role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub classes: Vec<String>,
    pub splits: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Resolution {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if manifest.classes.is_empty() {
            return Err(Error::data(format!("{}: empty class list", path.display())));
        }
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// A dataset spec resolved against its manifest.
pub struct ResolvedDataset {
    pub spec: DatasetSpec,
    pub classes: Vec<String>,
    split_dir: PathBuf,
}

impl DatasetSpec {
    pub fn resolve(&self) -> Result<ResolvedDataset> {
        let manifest = Manifest::load(&self.root)?;
        let split_name = manifest.splits.get(self.split.key()).ok_or_else(|| {
            Error::data(format!(
                "dataset {:?} has no {:?} split in its manifest",
                self.name, self.split
            ))
        })?;
        let split_dir = self.root.join(split_name);
        if !split_dir.is_dir() {
            return Err(Error::Resolution {
                path: split_dir,
                reason: "split directory does not exist".to_string(),
            });
        }
        Ok(ResolvedDataset {
            spec: self.clone(),
            classes: manifest.classes,
            split_dir,
        })
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("png") | Some("PNG") | Some("jpg") | Some("jpeg")
    )
}

impl ResolvedDataset {
    /// Image paths for one class, sorted by file name for platform-stable
    /// ordering.
    pub fn class_files(&self, class: &str) -> Result<Vec<PathBuf>> {
        let dir = self.split_dir.join(class);
        if !dir.is_dir() {
            return Err(Error::Resolution {
                path: dir,
                reason: format!("class directory for {class:?} does not exist"),
            });
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image_file(p))
            .collect();
        files.sort();
        Ok(files)
    }

    /// All (path, class index) pairs across every class.
    pub fn all_files(&self) -> Result<Vec<(PathBuf, usize)>> {
        let mut out = Vec::new();
        for (idx, class) in self.classes.iter().enumerate() {
            for path in self.class_files(class)? {
                out.push((path, idx));
            }
        }
        Ok(out)
    }
}

/// Deterministic resize / center-crop / per-channel normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Target square size after resize; `None` keeps the decoded size.
    pub resize: Option<u32>,
    /// Optional center crop applied after resize.
    pub crop: Option<u32>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resize: None,
            crop: None,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("preprocess.std: entries must be > 0"));
        }
        if let (Some(r), Some(c)) = (self.resize, self.crop) {
            if c > r {
                return Err(Error::config(format!(
                    "preprocess.crop: {c} exceeds resize {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Decode, resize, crop, and normalize one image file into a CHW tensor.
pub fn load_image(path: &Path, cfg: &PreprocessConfig) -> Result<Image> {
    cfg.validate()?;
    let decoded = image::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    preprocess(decoded.to_rgb8(), cfg)
}

fn preprocess(rgb: image::RgbImage, cfg: &PreprocessConfig) -> Result<Image> {
    let resized = match cfg.resize {
        Some(size) => image::imageops::resize(&rgb, size, size, image::imageops::FilterType::Triangle),
        None => rgb,
    };
    let cropped = match cfg.crop {
        Some(size) => {
            let (w, h) = resized.dimensions();
            if size > w || size > h {
                return Err(Error::config(format!(
                    "preprocess.crop: {size} exceeds image {w}x{h}"
                )));
            }
            image::imageops::crop_imm(&resized, (w - size) / 2, (h - size) / 2, size, size)
                .to_image()
        }
        None => resized,
    };
    let (w, h) = cropped.dimensions();
    let mut data = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in cropped.enumerate_pixels() {
        for c in 0..3 {
            let v = pixel.0[c] as f64 / 255.0;
            data[(c, y as usize, x as usize)] = (v - cfg.mean[c]) / cfg.std[c];
        }
    }
    Image::new(data)
}

/// A few-shot training episode: exactly `shots` images per class, drawn
/// without replacement under the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub shots: usize,
    pub class_list: Vec<String>,
    pub samples: Vec<(PathBuf, usize)>,
    pub seed: u64,
}

/// Per-class stream offset so the draw is independent of visitation order.
fn class_rng(seed: u64, class_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((class_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// First-`shots` prefix of a partial Fisher-Yates shuffle over `n` items.
fn draw_without_replacement(rng: &mut ChaCha8Rng, n: usize, shots: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..shots {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    indices.truncate(shots);
    indices
}

/// Draw a uniform without-replacement episode from an ID training split.
/// Only ID-role specs can produce episodes, so OOD images cannot reach the
/// training loop through this type.
pub fn sample_episode(spec: &DatasetSpec, shots: usize, seed: u64) -> Result<Episode> {
    if spec.role != Role::Id {
        return Err(Error::input(format!(
            "episodes are drawn from ID datasets only, got role {:?} for {:?}",
            spec.role, spec.name
        )));
    }
    if shots == 0 {
        return Err(Error::input("shots must be >= 1"));
    }
    let resolved = spec.resolve()?;
    let mut samples = Vec::with_capacity(shots * resolved.classes.len());
    for (idx, class) in resolved.classes.iter().enumerate() {
        let files = resolved.class_files(class)?;
        if files.len() < shots {
            return Err(Error::data(format!(
                "class {class:?} has {} images, fewer than the requested {shots} shots",
                files.len()
            )));
        }
        let mut rng = class_rng(seed, idx);
        for i in draw_without_replacement(&mut rng, files.len(), shots) {
            samples.push((files[i].clone(), idx));
        }
    }
    Ok(Episode {
        shots,
        class_list: resolved.classes,
        samples,
        seed,
    })
}

impl Episode {
    /// Load every episode image with the given preprocessing.
    pub fn load(&self, cfg: &PreprocessConfig) -> Result<Vec<(Image, usize)>> {
        self.samples
            .iter()
            .map(|(path, label)| Ok((load_image(path, cfg)?, *label)))
            .collect()
    }
}

/// Load a labeled test split.
pub fn load_labeled_split(spec: &DatasetSpec, cfg: &PreprocessConfig) -> Result<Vec<(Image, usize)>> {
    let resolved = spec.resolve()?;
    resolved
        .all_files()?
        .into_iter()
        .map(|(path, label)| Ok((load_image(&path, cfg)?, label)))
        .collect()
}

/// Load a test split discarding labels (OOD sets never supply labels).
pub fn load_unlabeled_split(spec: &DatasetSpec, cfg: &PreprocessConfig) -> Result<Vec<Image>> {
    let resolved = spec.resolve()?;
    resolved
        .all_files()?
        .into_iter()
        .map(|(path, _)| load_image(&path, cfg))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale datasets
// ---------------------------------------------------------------------------

/// Gaussian-cluster images for the toy backbone: a centered foreground block
/// with a per-class color over a shared gray background. ID and OOD palettes
/// are disjoint (offset hues, different brightness).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub id_classes: usize,
    pub ood_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Square image side in pixels; must match the toy backbone input.
    pub image_px: u32,
    /// Pixel noise amplitude in [0, 1] color units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            id_classes: 3,
            ood_classes: 2,
            train_per_class: 10,
            test_per_class: 20,
            image_px: 16,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_classes < 2 {
            return Err(Error::config("synthetic.id_classes: must be >= 2"));
        }
        if self.ood_classes == 0 {
            return Err(Error::config("synthetic.ood_classes: must be >= 1"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synthetic counts must be >= 1"));
        }
        if self.image_px < 4 {
            return Err(Error::config("synthetic.image_px: must be >= 4"));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(Error::config("synthetic.noise: must be in [0, 0.2]"));
        }
        Ok(())
    }
}

// Lexically distinct names keep the prompt embeddings well separated even
// under the toy text tower's pooling.
const ID_CLASS_WORDS: [&str; 8] = [
    "crimson", "azure", "gold", "emerald", "violet", "teal", "coral", "ivory",
];
const OOD_CLASS_WORDS: [&str; 8] = [
    "onyx", "slate", "umber", "navy", "plum", "rust", "moss", "smoke",
];

fn class_name_list(words: [&str; 8], fallback: &str, count: usize) -> Vec<String> {
    (0..count)
        .map(|c| {
            words
                .get(c)
                .map(|w| w.to_string())
                .unwrap_or_else(|| format!("{fallback}{c}"))
        })
        .collect()
}

fn hue_color(hue: f64, value: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h.rem_euclid(2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * value, g * value, b * value]
}

fn id_palette(classes: usize) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|c| hue_color(c as f64 / classes as f64, 0.9))
        .collect()
}

fn ood_palette(classes: usize, id_classes: usize) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|c| hue_color((c as f64 + 0.5) / id_classes.max(classes) as f64, 0.35))
        .collect()
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Candidate foreground colors: a coarse RGB lattice with near-background
/// grays removed.
fn candidate_colors() -> Vec<[f64; 3]> {
    let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut out = Vec::new();
    for &r in &levels {
        for &g in &levels {
            for &b in &levels {
                let contrast = [r, g, b]
                    .iter()
                    .map(|v: &f64| (v - 0.5).abs())
                    .fold(0.0, f64::max);
                if contrast >= 0.4 {
                    out.push([r, g, b]);
                }
            }
        }
    }
    out
}

/// Pooled image feature of a clean cluster image under default
/// normalization, as the pipeline will see it.
fn clean_cluster_feature(
    backbone: &crate::backbone::Backbone,
    px: u32,
    color: [f64; 3],
) -> Result<ndarray::Array1<f64>> {
    let quarter = px / 4;
    let (lo, hi) = (quarter as usize, (px - quarter) as usize);
    let side = px as usize;
    let data = Array3::from_shape_fn((3, side, side), |(c, y, x)| {
        let base = if y >= lo && y < hi && x >= lo && x < hi {
            color[c]
        } else {
            0.5
        };
        (base - 0.5) / 0.5
    });
    Ok(backbone.encode_image(&Image::new(data)?)?.vector)
}

fn name_embedding(backbone: &crate::backbone::Backbone, name: &str) -> Result<ndarray::Array1<f64>> {
    let empty = ndarray::Array2::zeros((0, backbone.token_dim()));
    let fwd = backbone.prompt_forward(&empty, name)?;
    crate::numeric::l2_normalize(&fwd.embedding.view())
}

const MIN_COLOR_SEPARATION: f64 = 0.45;

/// Alignment floor under which foreground/background mask polarity becomes
/// unreliable (background noise cosines are within roughly +-0.08).
const ALIGNMENT_FLOOR: f64 = 0.12;

/// Cap on the initial alignment so an untrained bank does not already solve
/// the benchmark; prompt training is what should close the gap.
const ALIGNMENT_TARGET: f64 = 0.25;

/// Pick each ID class color so the color's image feature aligns with the
/// class-name text embedding: above the floor that keeps mask polarity
/// correct, but no stronger than the target. Pretrained backbones bring
/// this cross-modal alignment from pretraining; with a seeded toy backbone
/// the data has to supply it for the mask stage to be meaningful.
fn aligned_id_palette(
    backbone: &crate::backbone::Backbone,
    class_names: &[String],
    px: u32,
) -> Result<Vec<[f64; 3]>> {
    let candidates = candidate_colors();
    let features = candidates
        .iter()
        .map(|&c| clean_cluster_feature(backbone, px, c))
        .collect::<Result<Vec<_>>>()?;
    let mut chosen: Vec<[f64; 3]> = Vec::with_capacity(class_names.len());
    for name in class_names {
        let target = name_embedding(backbone, name)?;
        // Prefer the strongest alignment inside [floor, target]; fall back
        // to the overall best when the band is empty.
        let mut in_band: Option<(usize, f64)> = None;
        let mut overall: Option<(usize, f64)> = None;
        for (i, feature) in features.iter().enumerate() {
            if chosen
                .iter()
                .any(|&c| color_distance(c, candidates[i]) < MIN_COLOR_SEPARATION)
            {
                continue;
            }
            let score = feature.dot(&target);
            if score >= ALIGNMENT_FLOOR
                && score <= ALIGNMENT_TARGET
                && in_band.map_or(true, |(_, s)| score > s)
            {
                in_band = Some((i, score));
            }
            if overall.map_or(true, |(_, s)| score > s) {
                overall = Some((i, score));
            }
        }
        let (index, score) = in_band.or(overall).ok_or_else(|| {
            Error::config("synthetic: not enough separated candidate colors for the class count")
        })?;
        if score < ALIGNMENT_FLOOR {
            log::warn!(
                "weak color/text alignment {score:.3} for class {name:?}; masks may be unreliable"
            );
        }
        chosen.push(candidates[index]);
    }
    Ok(chosen)
}

/// Spread OOD colors away from the ID palette and each other.
fn spread_ood_palette(id_colors: &[[f64; 3]], count: usize) -> Result<Vec<[f64; 3]>> {
    let candidates = candidate_colors();
    let mut chosen: Vec<[f64; 3]> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best: Option<([f64; 3], f64)> = None;
        for &candidate in &candidates {
            let min_dist = id_colors
                .iter()
                .chain(chosen.iter())
                .map(|&c| color_distance(c, candidate))
                .fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(_, d)| min_dist > d) {
                best = Some((candidate, min_dist));
            }
        }
        let (color, dist) = best.expect("candidate list is never empty");
        if dist < 0.2 {
            log::warn!("OOD color {color:?} is only {dist:.2} from an existing cluster");
        }
        chosen.push(color);
    }
    Ok(chosen)
}

fn render_cluster_image(
    px: u32,
    color: [f64; 3],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> image::RgbImage {
    let background = 0.5;
    let quarter = px / 4;
    let (lo, hi) = (quarter, px - quarter);
    image::RgbImage::from_fn(px, px, |x, y| {
        let fg = x >= lo && x < hi && y >= lo && y < hi;
        let mut pixel = [0u8; 3];
        for c in 0..3 {
            let base = if fg { color[c] } else { background };
            let v = base + rng.gen_range(-noise..=noise);
            pixel[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        image::Rgb(pixel)
    })
}

fn write_class_split(
    dir: &Path,
    class: &str,
    count: usize,
    px: u32,
    color: [f64; 3],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let class_dir = dir.join(class);
    std::fs::create_dir_all(&class_dir)?;
    for i in 0..count {
        let img = render_cluster_image(px, color, noise, rng);
        img.save(class_dir.join(format!("img_{i:05}.png")))?;
    }
    Ok(())
}

/// Layout written by `generate_synthetic`.
pub struct SyntheticLayout {
    pub id_root: PathBuf,
    pub ood_root: PathBuf,
    pub id_classes: Vec<String>,
    pub ood_classes: Vec<String>,
}

/// Write the synthetic ID dataset (train + test splits) and one OOD dataset
/// (test split) under `root`. With `align_to` set, ID foreground colors are
/// chosen so their image features align with the class-name text embeddings
/// under that backbone; otherwise a fixed hue palette is used.
pub fn generate_synthetic(
    root: &Path,
    cfg: &SyntheticConfig,
    align_to: Option<&crate::backbone::Backbone>,
) -> Result<SyntheticLayout> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let id_root = root.join("id");
    let ood_root = root.join("ood");

    let id_classes = class_name_list(ID_CLASS_WORDS, "cluster", cfg.id_classes);
    let ood_classes = class_name_list(OOD_CLASS_WORDS, "novel", cfg.ood_classes);
    let (id_colors, ood_colors) = match align_to {
        Some(backbone) => {
            let id_colors = aligned_id_palette(backbone, &id_classes, cfg.image_px)?;
            let ood_colors = spread_ood_palette(&id_colors, cfg.ood_classes)?;
            (id_colors, ood_colors)
        }
        None => (
            id_palette(cfg.id_classes),
            ood_palette(cfg.ood_classes, cfg.id_classes),
        ),
    };

    for (split, count) in [("train", cfg.train_per_class), ("test", cfg.test_per_class)] {
        let dir = id_root.join(split);
        for (class, color) in id_classes.iter().zip(&id_colors) {
            write_class_split(&dir, class, count, cfg.image_px, *color, cfg.noise, &mut rng)?;
        }
    }
    Manifest {
        name: "synthetic-id".to_string(),
        classes: id_classes.clone(),
        splits: BTreeMap::from([
            ("train".to_string(), "train".to_string()),
            ("test".to_string(), "test".to_string()),
        ]),
    }
    .save(&id_root)?;

    let dir = ood_root.join("test");
    for (class, color) in ood_classes.iter().zip(&ood_colors) {
        write_class_split(&dir, class, cfg.test_per_class, cfg.image_px, *color, cfg.noise, &mut rng)?;
    }
    Manifest {
        name: "synthetic-ood".to_string(),
        classes: ood_classes.clone(),
        splits: BTreeMap::from([("test".to_string(), "test".to_string())]),
    }
    .save(&ood_root)?;

    Ok(SyntheticLayout {
        id_root,
        ood_root,
        id_classes,
        ood_classes,
    })
}

// ---------------------------------------------------------------------------
// Packed-archive conversion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Convert CIFAR-style binary archives into the directory-per-class layout.
/// For CIFAR-100 a newline-separated fine-label names file is required.
pub fn convert_cifar(
    input: &Path,
    output: &Path,
    variant: CifarVariant,
    class_names_file: Option<&Path>,
) -> Result<()> {
    let classes: Vec<String> = match (variant, class_names_file) {
        (CifarVariant::Cifar10, _) => CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        (CifarVariant::Cifar100, Some(path)) => std::fs::read_to_string(path)
            .map_err(|e| Error::Resolution {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        (CifarVariant::Cifar100, None) => {
            return Err(Error::config(
                "convert-dataset: CIFAR-100 requires --class-names with the fine label names",
            ))
        }
    };
    let expected_classes = match variant {
        CifarVariant::Cifar10 => 10,
        CifarVariant::Cifar100 => 100,
    };
    if classes.len() != expected_classes {
        return Err(Error::config(format!(
            "convert-dataset: expected {expected_classes} class names, got {}",
            classes.len()
        )));
    }

    let batches: Vec<(&str, Vec<String>)> = match variant {
        CifarVariant::Cifar10 => vec![
            (
                "train",
                (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            ),
            ("test", vec!["test_batch.bin".to_string()]),
        ],
        CifarVariant::Cifar100 => vec![
            ("train", vec!["train.bin".to_string()]),
            ("test", vec!["test.bin".to_string()]),
        ],
    };

    let record_len = match variant {
        CifarVariant::Cifar10 => 3073,
        CifarVariant::Cifar100 => 3074,
    };

    for (split, files) in &batches {
        let split_dir = output.join(split);
        let mut per_class_counter = vec![0usize; classes.len()];
        for file in files {
            let path = input.join(file);
            let bytes = std::fs::read(&path).map_err(|e| Error::Resolution {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if bytes.len() % record_len != 0 {
                return Err(Error::data(format!(
                    "{}: size {} is not a multiple of the {record_len}-byte record",
                    path.display(),
                    bytes.len()
                )));
            }
            for record in bytes.chunks_exact(record_len) {
                let label = match variant {
                    CifarVariant::Cifar10 => record[0] as usize,
                    CifarVariant::Cifar100 => record[1] as usize, // fine label
                };
                if label >= classes.len() {
                    return Err(Error::data(format!(
                        "{}: label {label} out of range",
                        path.display()
                    )));
                }
                let pixels = &record[record_len - 3072..];
                let img = image::RgbImage::from_fn(32, 32, |x, y| {
                    let offset = (y * 32 + x) as usize;
                    image::Rgb([
                        pixels[offset],
                        pixels[1024 + offset],
                        pixels[2048 + offset],
                    ])
                });
                let class_dir = split_dir.join(&classes[label]);
                std::fs::create_dir_all(&class_dir)?;
                img.save(class_dir.join(format!("img_{:05}.png", per_class_counter[label])))?;
                per_class_counter[label] += 1;
            }
        }
    }

    Manifest {
        name: match variant {
            CifarVariant::Cifar10 => "cifar10".to_string(),
            CifarVariant::Cifar100 => "cifar100".to_string(),
        },
        classes,
        splits: BTreeMap::from([
            ("train".to_string(), "train".to_string()),
            ("test".to_string(), "test".to_string()),
        ]),
    }
    .save(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp_dataset(classes: &[(&str, usize)]) -> (tempfile::TempDir, DatasetSpec) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (class, count) in classes {
            let class_dir = root.join("train").join(class);
            std::fs::create_dir_all(&class_dir).unwrap();
            for i in 0..*count {
                render_cluster_image(8, [0.9, 0.1, 0.1], 0.01, &mut rng)
                    .save(class_dir.join(format!("img_{i:05}.png")))
                    .unwrap();
            }
        }
        Manifest {
            name: "tmp".to_string(),
            classes: classes.iter().map(|(c, _)| c.to_string()).collect(),
            splits: BTreeMap::from([("train".to_string(), "train".to_string())]),
        }
        .save(&root)
        .unwrap();
        let spec = DatasetSpec {
            name: "tmp".to_string(),
            root,
            split: Split::Train,
            role: Role::Id,
        };
        (dir, spec)
    }

    #[test]
    fn episode_is_deterministic() {
        let (_dir, spec) = write_temp_dataset(&[("a", 10), ("b", 10), ("c", 10)]);
        let e1 = sample_episode(&spec, 2, 42).unwrap();
        let e2 = sample_episode(&spec, 2, 42).unwrap();
        assert_eq!(e1.samples, e2.samples);
        assert_eq!(e1.samples.len(), 6);
        let e3 = sample_episode(&spec, 2, 43).unwrap();
        assert_ne!(e1.samples, e3.samples);
    }

    #[test]
    fn exhaustive_draw_takes_every_image() {
        let (_dir, spec) = write_temp_dataset(&[("a", 4), ("b", 4)]);
        let e = sample_episode(&spec, 4, 0).unwrap();
        assert_eq!(e.samples.len(), 8);
        let class_a: std::collections::BTreeSet<_> = e
            .samples
            .iter()
            .filter(|(_, l)| *l == 0)
            .map(|(p, _)| p.clone())
            .collect();
        assert_eq!(class_a.len(), 4);
    }

    #[test]
    fn too_few_images_names_the_class() {
        let (_dir, spec) = write_temp_dataset(&[("plentiful", 5), ("scarce", 1)]);
        let err = sample_episode(&spec, 2, 0).unwrap_err();
        assert!(err.to_string().contains("scarce"));
    }

    #[test]
    fn episode_matches_reference_draw() {
        let (_dir, spec) = write_temp_dataset(&[("a", 10), ("b", 10), ("c", 10)]);
        let shots = 1;
        let seed = 0u64;
        let episode = sample_episode(&spec, shots, seed).unwrap();
        // Reference oracle: re-run the pinned generator and partial
        // Fisher-Yates by hand against the sorted file list.
        let resolved = spec.resolve().unwrap();
        for (idx, class) in resolved.classes.iter().enumerate() {
            let files = resolved.class_files(class).unwrap();
            let mut rng = class_rng(seed, idx);
            let mut order: Vec<usize> = (0..files.len()).collect();
            for i in 0..shots {
                let j = rng.gen_range(i..files.len());
                order.swap(i, j);
            }
            let expected: Vec<PathBuf> = order[..shots].iter().map(|&i| files[i].clone()).collect();
            let actual: Vec<PathBuf> = episode
                .samples
                .iter()
                .filter(|(_, l)| *l == idx)
                .map(|(p, _)| p.clone())
                .collect();
            assert_eq!(actual, expected);
        }
    }

    #[test]
    fn ood_role_cannot_produce_episodes() {
        let (_dir, mut spec) = write_temp_dataset(&[("a", 3)]);
        spec.role = Role::Ood;
        assert!(matches!(
            sample_episode(&spec, 1, 0),
            Err(Error::InputContract(_))
        ));
    }

    #[test]
    fn solid_color_image_loads_as_constant_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("solid.png");
        image::RgbImage::from_pixel(8, 8, image::Rgb([255, 128, 0]))
            .save(&path)
            .unwrap();
        let cfg = PreprocessConfig::default();
        let img = load_image(&path, &cfg).unwrap();
        for c in 0..3 {
            let first = img.data[(c, 0, 0)];
            for v in img.data.index_axis(ndarray::Axis(0), c).iter() {
                assert!((v - first).abs() < 1e-12);
            }
        }
        // (255/255 - 0.5) / 0.5 = 1.0
        assert!((img.data[(0, 0, 0)] - 1.0).abs() < 1e-12);
        let again = load_image(&path, &cfg).unwrap();
        assert_eq!(img.data, again.data);
    }

    #[test]
    fn small_input_upscales_to_target() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.png");
        image::RgbImage::from_pixel(32, 32, image::Rgb([10, 20, 30]))
            .save(&path)
            .unwrap();
        let cfg = PreprocessConfig {
            resize: Some(224),
            crop: Some(224),
            ..PreprocessConfig::default()
        };
        let img = load_image(&path, &cfg).unwrap();
        assert_eq!(img.data.shape(), &[3, 224, 224]);
    }

    #[test]
    fn synthetic_generator_layout_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            train_per_class: 3,
            test_per_class: 2,
            ..SyntheticConfig::default()
        };
        let layout = generate_synthetic(dir.path(), &cfg, None).unwrap();
        assert_eq!(layout.id_classes.len(), 3);
        let spec = DatasetSpec {
            name: "synthetic-id".to_string(),
            root: layout.id_root.clone(),
            split: Split::Train,
            role: Role::Id,
        };
        let resolved = spec.resolve().unwrap();
        for class in &resolved.classes {
            assert_eq!(resolved.class_files(class).unwrap().len(), 3);
        }
        let ood_spec = DatasetSpec {
            name: "synthetic-ood".to_string(),
            root: layout.ood_root.clone(),
            split: Split::Test,
            role: Role::Ood,
        };
        let images = load_unlabeled_split(&ood_spec, &PreprocessConfig::default()).unwrap();
        assert_eq!(images.len(), 2 * 2);
    }

    #[test]
    fn aligned_palette_correlates_with_name_embeddings() {
        let backbone = crate::backbone::Backbone::Toy(
            crate::backbone::ToyBackbone::new(crate::backbone::ToyConfig::default()).unwrap(),
        );
        let names = class_name_list(ID_CLASS_WORDS, "cluster", 3);
        let colors = aligned_id_palette(&backbone, &names, 16).unwrap();
        for (name, &color) in names.iter().zip(&colors) {
            let feature = clean_cluster_feature(&backbone, 16, color).unwrap();
            let target = name_embedding(&backbone, name).unwrap();
            assert!(
                feature.dot(&target) > 0.1,
                "class {name}: alignment too weak"
            );
        }
        for i in 0..colors.len() {
            for j in (i + 1)..colors.len() {
                assert!(color_distance(colors[i], colors[j]) >= MIN_COLOR_SEPARATION);
            }
        }
    }

    #[test]
    fn cifar10_conversion_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("bin");
        std::fs::create_dir_all(&input).unwrap();
        // Two records per train batch, labels 0 and 3, constant pixels.
        let make_batch = |labels: &[u8]| {
            let mut bytes = Vec::new();
            for &label in labels {
                bytes.push(label);
                bytes.extend(std::iter::repeat(label * 20).take(3072));
            }
            bytes
        };
        for i in 1..=5 {
            std::fs::write(input.join(format!("data_batch_{i}.bin")), make_batch(&[0, 3])).unwrap();
        }
        std::fs::write(input.join("test_batch.bin"), make_batch(&[3])).unwrap();
        let output = dir.path().join("out");
        convert_cifar(&input, &output, CifarVariant::Cifar10, None).unwrap();
        let manifest = Manifest::load(&output).unwrap();
        assert_eq!(manifest.classes.len(), 10);
        assert_eq!(manifest.classes[3], "cat");
        let spec = DatasetSpec {
            name: "cifar10".to_string(),
            root: output,
            split: Split::Train,
            role: Role::Id,
        };
        let resolved = spec.resolve().unwrap();
        assert_eq!(resolved.class_files("airplane").unwrap().len(), 5);
        assert_eq!(resolved.class_files("cat").unwrap().len(), 5);
    }
}
