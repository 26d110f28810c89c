//! Similarity maps and foreground/background partitioning.
//!
//! Patch embeddings from the modified (surgery) path are scored against the
//! ground-truth class text embedding and min-max normalized per image. The
//! unmodified backbone produces an opposite-tending map; the difference
//! between the two sharpens the foreground/background boundary before
//! thresholding. A rank-based partition is kept as an ablation baseline.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::backbone::{Backbone, Image, PatchGrid, SurgeryConfig};
use crate::error::{Error, Result};
use crate::numeric::NORM_EPS;
use crate::textbank::TextEmbeddings;

/// Score assigned to every cell when the raw map is constant and min-max
/// normalization is undefined. 0.5 sits exactly on the threshold, so strict
/// thresholding sends all cells to the background.
pub const DEGENERATE_SCORE: f64 = 0.5;

/// Foreground threshold on the adjusted score.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

/// Weight on the (map - opposite map) correction term.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DiscrepancyConfig {
    pub coefficient: f64,
}

impl Default for DiscrepancyConfig {
    fn default() -> Self {
        DiscrepancyConfig { coefficient: 0.1 }
    }
}

impl DiscrepancyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coefficient >= 0.0) {
            return Err(Error::config(format!(
                "masking.coefficient: must be >= 0, got {}",
                self.coefficient
            )));
        }
        Ok(())
    }
}

/// Per-cell similarity scores normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    scores: Array2<f64>,
}

impl SimilarityMap {
    /// Min-max normalize a raw score map to [0, 1]. A constant map gets
    /// `DEGENERATE_SCORE` everywhere.
    pub fn from_raw(raw: Array2<f64>) -> Result<Self> {
        if !crate::numeric::all_finite(raw.iter()) {
            return Err(Error::numeric("similarity map contains non-finite values"));
        }
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scores = if max - min < 1e-12 {
            Array2::from_elem(raw.raw_dim(), DEGENERATE_SCORE)
        } else {
            raw.mapv(|x| (x - min) / (max - min))
        };
        Ok(SimilarityMap { scores })
    }

    /// Wrap scores that are already in [0, 1].
    pub fn from_normalized(scores: Array2<f64>) -> Result<Self> {
        for &s in scores.iter() {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::input(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(SimilarityMap { scores })
    }

    pub fn rows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn cols(&self) -> usize {
        self.scores.ncols()
    }

    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[(row, col)]
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }
}

/// Disjoint foreground/background split covering the whole grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    rows: usize,
    cols: usize,
    foreground: BTreeSet<(usize, usize)>,
}

impl RegionPartition {
    pub fn new(rows: usize, cols: usize, foreground: BTreeSet<(usize, usize)>) -> Result<Self> {
        for &(i, j) in &foreground {
            if i >= rows || j >= cols {
                return Err(Error::input(format!(
                    "cell ({i},{j}) outside {rows}x{cols} grid"
                )));
            }
        }
        Ok(RegionPartition {
            rows,
            cols,
            foreground,
        })
    }

    /// All cells marked foreground.
    pub fn with_all_foreground(rows: usize, cols: usize) -> Self {
        let foreground = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .collect();
        RegionPartition {
            rows,
            cols,
            foreground,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn foreground(&self) -> &BTreeSet<(usize, usize)> {
        &self.foreground
    }

    pub fn background(&self) -> BTreeSet<(usize, usize)> {
        let mut bg = BTreeSet::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.foreground.contains(&(i, j)) {
                    bg.insert((i, j));
                }
            }
        }
        bg
    }

    pub fn is_foreground(&self, cell: (usize, usize)) -> bool {
        self.foreground.contains(&cell)
    }
}

fn cell_cosine(cell: &ArrayView1<f64>, class_embedding: &ArrayView1<f64>) -> Result<f64> {
    if cell.len() != class_embedding.len() {
        return Err(Error::input(format!(
            "patch dim {} does not match embedding dim {}",
            cell.len(),
            class_embedding.len()
        )));
    }
    let norm = cell.dot(cell).sqrt();
    if norm < NORM_EPS {
        // A directionless patch carries no evidence either way.
        return Ok(0.0);
    }
    Ok(cell.dot(class_embedding) / norm)
}

/// Cosine-similarity map of every patch against one class embedding,
/// min-max normalized per image.
pub fn similarity_map(patches: &PatchGrid, class_embedding: &ArrayView1<f64>) -> Result<SimilarityMap> {
    let mut raw = Array2::<f64>::zeros((patches.rows(), patches.cols()));
    for (i, j) in patches.cells() {
        raw[(i, j)] = cell_cosine(&patches.cell(i, j), class_embedding)?;
    }
    SimilarityMap::from_raw(raw)
}

/// Similarity map from the unmodified backbone path (original attention,
/// no context incorporation). This is the map with the opposite tendency
/// that the discrepancy correction exploits.
pub fn clip_similarity_map(
    backbone: &Backbone,
    image: &Image,
    class_embedding: &ArrayView1<f64>,
) -> Result<SimilarityMap> {
    let patches = backbone.plain_patch_embeddings(image)?;
    similarity_map(&patches, class_embedding)
}

/// Similarity map from the full surgery path.
pub fn surgery_similarity_map(
    backbone: &Backbone,
    image: &Image,
    cfg: &SurgeryConfig,
    class_embedding: &ArrayView1<f64>,
) -> Result<SimilarityMap> {
    let patches = backbone.surgery_patch_embeddings(image, cfg)?;
    similarity_map(&patches, class_embedding)
}

/// Adjusted score used for thresholding.
fn adjusted(s: f64, s_clip: f64, coefficient: f64) -> f64 {
    s + (s - s_clip) * coefficient
}

/// Threshold the surgery map, corrected by its discrepancy against the
/// unmodified map: a cell is foreground iff
/// `s + coefficient * (s - s_clip) > 0.5`. If that leaves the foreground
/// empty, the single highest-scoring cell is promoted so downstream pooling
/// stays defined.
pub fn discrepancy_partition(
    map: &SimilarityMap,
    map_clip: &SimilarityMap,
    cfg: &DiscrepancyConfig,
) -> Result<RegionPartition> {
    cfg.validate()?;
    if map.rows() != map_clip.rows() || map.cols() != map_clip.cols() {
        return Err(Error::input(format!(
            "map shapes differ: {}x{} vs {}x{}",
            map.rows(),
            map.cols(),
            map_clip.rows(),
            map_clip.cols()
        )));
    }
    let mut foreground = BTreeSet::new();
    let mut best: Option<((usize, usize), f64)> = None;
    for i in 0..map.rows() {
        for j in 0..map.cols() {
            let a = adjusted(map.score(i, j), map_clip.score(i, j), cfg.coefficient);
            if a > FOREGROUND_THRESHOLD {
                foreground.insert((i, j));
            }
            if best.as_ref().map_or(true, |&(_, b)| a > b) {
                best = Some(((i, j), a));
            }
        }
    }
    if foreground.is_empty() {
        let (cell, _) = best.expect("non-empty grid");
        log::warn!("empty foreground after thresholding; falling back to best cell {cell:?}");
        foreground.insert(cell);
    }
    RegionPartition::new(map.rows(), map.cols(), foreground)
}

/// Rank-based baseline: a cell is foreground iff the true class is among the
/// top K classes by similarity for that patch. Ties do not evict the true
/// class: only strictly greater similarities count against its rank.
pub fn topk_partition(
    patches: &PatchGrid,
    embeddings: &TextEmbeddings,
    true_class: usize,
    k: usize,
) -> Result<RegionPartition> {
    let m = embeddings.num_id_classes();
    if true_class >= m {
        return Err(Error::input(format!(
            "true_class {true_class} out of range for {m} ID classes"
        )));
    }
    if k == 0 || k > m {
        return Err(Error::input(format!("K must be in 1..={m}, got {k}")));
    }
    let mut foreground = BTreeSet::new();
    for (i, j) in patches.cells() {
        let cell = patches.cell(i, j);
        let sim_true = cell_cosine(&cell, &embeddings.row(true_class))?;
        let mut strictly_above = 0;
        for c in 0..m {
            if c != true_class && cell_cosine(&cell, &embeddings.row(c))? > sim_true {
                strictly_above += 1;
            }
        }
        if strictly_above < k {
            foreground.insert((i, j));
        }
    }
    RegionPartition::new(patches.rows(), patches.cols(), foreground)
}

/// Write the partition as an 8-bit grayscale mask (255 = foreground),
/// a grayscale heatmap of the normalized scores, and a sidecar text file
/// with the raw normalized scores. `scale` upsamples cells to blocks of
/// `scale` x `scale` pixels.
pub fn write_mask_artifacts(
    dir: &Path,
    stem: &str,
    partition: &RegionPartition,
    map: &SimilarityMap,
    scale: usize,
) -> Result<()> {
    let scale = scale.max(1);
    let (rows, cols) = (map.rows(), map.cols());
    let mut mask = image::GrayImage::new((cols * scale) as u32, (rows * scale) as u32);
    let mut heat = image::GrayImage::new((cols * scale) as u32, (rows * scale) as u32);
    for i in 0..rows {
        for j in 0..cols {
            let mask_value = if partition.is_foreground((i, j)) { 255 } else { 0 };
            let heat_value = (map.score(i, j) * 255.0).round().clamp(0.0, 255.0) as u8;
            for pi in 0..scale {
                for pj in 0..scale {
                    let (x, y) = ((j * scale + pj) as u32, (i * scale + pi) as u32);
                    mask.put_pixel(x, y, image::Luma([mask_value]));
                    heat.put_pixel(x, y, image::Luma([heat_value]));
                }
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    mask.save(dir.join(format!("{stem}_mask.png")))?;
    heat.save(dir.join(format!("{stem}_heat.png")))?;
    let mut text = String::new();
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| format!("{}", map.score(i, j))).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(dir.join(format!("{stem}_scores.txt")), text)?;
    Ok(())
}
