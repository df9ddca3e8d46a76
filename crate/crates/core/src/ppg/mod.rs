//! Pseudo prompt generation: correlation map -> per-class points, masks and boxes.
//!
//! For each class the correlation row is turned into a spatial probability map
//! (temperature softmax), thresholded relative to its maximum, split into at
//! most `N_o` regions by k-means over pixel coordinates, and each region
//! yields its mask, its highest-probability pixel and its bounding box.
//! All of this is non-differentiable and runs on plain slices.

pub mod kmeans;
pub mod prompt_encoder;

use crate::config::ModelConfig;
use crate::correlation::CorrelationMap;
use crate::error::{EscError, Result};

pub use kmeans::cluster_regions;
pub use prompt_encoder::{PromptEmbeddings, PromptEncoder};

/// Grid coordinate `(row, col)`.
pub type Cell = (usize, usize);

/// Inclusive bounding box `(r0, c0, r1, c1)`.
pub type BoxCells = (usize, usize, usize, usize);

/// Pseudo prompts of one class; every vector has `N_o` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPrompts {
    pub points: Vec<Option<Cell>>,
    pub masks: Vec<Vec<bool>>,
    pub boxes: Vec<Option<BoxCells>>,
}

impl ClassPrompts {
    pub fn valid_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }

    /// Pointwise union of all region masks.
    pub fn mask_union(&self) -> Vec<bool> {
        let n = self.masks.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| self.masks.iter().any(|m| m[i]))
            .collect()
    }

    pub fn empty(slots: usize, len: usize) -> Self {
        Self {
            points: vec![None; slots],
            masks: vec![vec![false; len]; slots],
            boxes: vec![None; slots],
        }
    }
}

/// Prompts for a batch of images: `classes[b * N_c + n]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoPrompts {
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    pub classes: Vec<ClassPrompts>,
}

/// Softmax of `row / tau` over the flattened spatial axis.
pub fn spatial_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Foreground where the probability reaches `alpha` times the map maximum.
pub fn binarize(prob: &[f64], alpha: f64) -> Vec<bool> {
    let max = prob.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return vec![false; prob.len()];
    }
    prob.iter().map(|&p| p / max >= alpha).collect()
}

/// First index (row-major) holding the maximum among `cells` where `keep` holds.
fn argmax_where(prob: &[f64], keep: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..prob.len() {
        if !keep(i) {
            continue;
        }
        match best {
            Some(b) if !(prob[i] > prob[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Turns a region labelling into per-region masks, peak points and boxes.
pub fn extract_prompts(
    prob: &[f64],
    regions: &[i32],
    height: usize,
    width: usize,
    slots: usize,
) -> Result<ClassPrompts> {
    if prob.len() != height * width || regions.len() != prob.len() {
        return Err(EscError::Shape(format!(
            "probability map ({}) and regions ({}) must both hold {height}x{width} entries",
            prob.len(),
            regions.len()
        )));
    }
    let mut out = ClassPrompts::empty(slots, prob.len());
    let k = regions.iter().cloned().max().map_or(0, |m| (m + 1).max(0) as usize);
    for r in 0..k.min(slots) {
        let mask: Vec<bool> = regions.iter().map(|&l| l == r as i32).collect();
        let Some(peak) = argmax_where(prob, |i| mask[i]) else {
            continue;
        };
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (row, col) = (i / width, i % width);
            r0 = r0.min(row);
            c0 = c0.min(col);
            r1 = r1.max(row);
            c1 = c1.max(col);
        }
        out.points[r] = Some((peak / width, peak % width));
        out.boxes[r] = Some((r0, c0, r1, c1));
        out.masks[r] = mask;
    }
    Ok(out)
}

/// Full per-class pipeline: softmax, binarize, cluster, extract. A class whose
/// binary map is empty falls back to its global argmax as a one-pixel prompt.
pub fn class_prompts(
    row: &[f64],
    height: usize,
    width: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ClassPrompts> {
    let slots = cfg.prompts_per_class;
    let prob = spatial_softmax(row, cfg.tau);
    let binary = binarize(&prob, cfg.alpha);
    if binary.iter().any(|&b| b) {
        let regions = cluster_regions(
            &binary,
            height,
            width,
            slots,
            seed,
            cfg.kmeans_restarts,
            cfg.kmeans_max_iter,
        )?;
        extract_prompts(&prob, &regions, height, width, slots)
    } else {
        // non-finite inputs leave nothing above threshold
        let clean: Vec<f64> = row
            .iter()
            .map(|&x| if x.is_nan() { f64::NEG_INFINITY } else { x })
            .collect();
        let peak = argmax_where(&clean, |_| true).unwrap_or(0);
        let mut regions = vec![-1; row.len()];
        regions[peak] = 0;
        let ones: Vec<f64> = vec![1.0; row.len()];
        extract_prompts(&ones, &regions, height, width, slots)
    }
}

/// Generates prompts for every (image, class) pair of a correlation map.
pub fn generate(corr: &CorrelationMap, cfg: &ModelConfig, seed: u64) -> Result<PseudoPrompts> {
    let (b, n, h, w) = corr.values.dims4()?;
    let values = corr
        .values
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let len = h * w;
    let classes = (0..b * n)
        .map(|s| class_prompts(&values[s * len..(s + 1) * len], h, w, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoPrompts {
        height: h,
        width: w,
        slots: cfg.prompts_per_class,
        classes,
    })
}
