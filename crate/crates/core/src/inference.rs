//! Score initialization from checkerboard masks, progressive mask
//! refinement and multi-scale ensembling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MaskPlane, ScoreMap};
use crate::masking::{apply_mask, make_checkerboard_pair, GridSpec, ScaleSet};
use crate::metrics::{error_map_with, SimilarityConfig};
use crate::net::{compose, Restorer};
use crate::train::ThresholdTable;

pub const DEFAULT_MAX_ITERS: usize = 10;

/// How the per-scale scalar score is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNumerator {
    /// `Σ S^k` over the whole image.
    #[default]
    FullImage,
    /// `Σ S^k` over masked pixels only.
    MaskedOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub max_iters: usize,
    pub numerator: ScoreNumerator,
    pub similarity: SimilarityConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            numerator: ScoreNumerator::FullImage,
            similarity: SimilarityConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        self.similarity.gms.validate()?;
        self.similarity.ssim.validate()
    }
}

/// Error map `f(I, Î)` after restoring the masked part of `image`.
pub fn restoration_error<R: Restorer + ?Sized>(
    restorer: &R,
    image: &Image,
    mask: &MaskPlane,
    cfg: &SimilarityConfig,
) -> Result<ScoreMap> {
    if mask.count_visible() == mask.data().len() {
        // Composition copies every pixel from the input.
        return error_map_with(image, image, cfg);
    }
    let masked = apply_mask(image, mask)?;
    let restored = restorer.restore(&masked, mask)?;
    let composed = compose(image, &restored, mask)?;
    error_map_with(image, &composed, cfg)
}

/// The two error maps from the checkerboard pair at grid size `cell`.
pub fn checkerboard_maps<R: Restorer + ?Sized>(
    restorer: &R,
    image: &Image,
    cell: usize,
    cfg: &SimilarityConfig,
) -> Result<[ScoreMap; 2]> {
    let grid = GridSpec::new(cell, image.height(), image.width())?;
    let (a, b) = make_checkerboard_pair(grid);
    Ok([
        restoration_error(restorer, image, &a, cfg)?,
        restoration_error(restorer, image, &b, cfg)?,
    ])
}

/// `S^0`: mean of the `2·|scales|` checkerboard error maps.
pub fn initialize_scores<R: Restorer + ?Sized>(
    restorer: &R,
    image: &Image,
    scales: &ScaleSet,
    cfg: &SimilarityConfig,
) -> Result<ScoreMap> {
    let maps: Vec<ScoreMap> = scales
        .iter()
        .map(|k| checkerboard_maps(restorer, image, k, cfg))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(mean_maps(&maps))
}

/// Element-wise mean of equally sized maps, summed in the given order.
pub fn mean_maps(maps: &[ScoreMap]) -> ScoreMap {
    let first = &maps[0];
    let mut out = ScoreMap::zeros(first.height(), first.width());
    for m in maps {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    let n = maps.len() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    out
}

/// Mean of `scores` over every grid cell, row-major.
pub fn patch_means(scores: &ScoreMap, grid: GridSpec) -> Result<Vec<f64>> {
    if (scores.height(), scores.width()) != (grid.height(), grid.width()) {
        return Err(Error::shape(
            format!("{}x{}", grid.height(), grid.width()),
            format!("{}x{}", scores.height(), scores.width()),
        ));
    }
    let k = grid.cell();
    let mut sums = vec![0.0; grid.cell_count()];
    for y in 0..grid.height() {
        let row = (y / k) * grid.cols();
        for x in 0..grid.width() {
            sums[row + x / k] += scores.get(y, x);
        }
    }
    let area = (k * k) as f64;
    Ok(sums.into_iter().map(|s| s / area).collect())
}

/// Masks every cell whose mean score exceeds `eta`.
pub fn refine_mask(scores: &ScoreMap, grid: GridSpec, eta: f64) -> Result<MaskPlane> {
    let means = patch_means(scores, grid)?;
    let cols = grid.cols();
    Ok(grid.expand(|r, c| !(means[r * cols + c] > eta)))
}

/// Scalar score of a map under the final mask.
pub fn scale_score(scores: &ScoreMap, mask: &MaskPlane, numerator: ScoreNumerator) -> f64 {
    let sum: f64 = match numerator {
        ScoreNumerator::FullImage => scores.sum(),
        ScoreNumerator::MaskedOnly => scores
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m == 0)
            .map(|(s, _)| s)
            .sum(),
    };
    sum / mask.count_visible().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementState {
    pub cell: usize,
    pub mask: MaskPlane,
    pub scores: ScoreMap,
    /// Restorations performed.
    pub iterations: usize,
    pub converged: bool,
    pub epsilon: f64,
}

/// Alternates mask refinement and restoration until the mask stops
/// changing or `max_iters` restorations have been run.
pub fn progressive_refinement<R: Restorer + ?Sized>(
    restorer: &R,
    image: &Image,
    cell: usize,
    eta: f64,
    initial: &ScoreMap,
    cfg: &InferenceConfig,
) -> Result<RefinementState> {
    cfg.validate()?;
    let grid = GridSpec::new(cell, image.height(), image.width())?;
    let mut mask = refine_mask(initial, grid, eta)?;
    let mut iterations = 0;
    loop {
        let scores = restoration_error(restorer, image, &mask, &cfg.similarity)?;
        iterations += 1;
        let next = refine_mask(&scores, grid, eta)?;
        let converged = next == mask;
        if converged || iterations == cfg.max_iters {
            let epsilon = scale_score(&scores, &mask, cfg.numerator);
            return Ok(RefinementState {
                cell,
                mask,
                scores,
                iterations,
                converged,
                epsilon,
            });
        }
        mask = next;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub scales: Vec<RefinementState>,
    /// `S^final`: mean of the per-scale maps.
    pub scores: ScoreMap,
    /// Mean of the per-scale scalar scores.
    pub epsilon: f64,
}

/// Full detection for one image. Refinements of the different scales
/// share `S^0` and run in parallel.
pub fn detect<R: Restorer + ?Sized>(
    restorer: &R,
    thresholds: &ThresholdTable,
    image: &Image,
    scales: &ScaleSet,
    cfg: &InferenceConfig,
) -> Result<DetectionResult> {
    cfg.validate()?;
    let etas: Vec<(usize, f64)> = scales
        .iter()
        .map(|k| thresholds.get(k).map(|eta| (k, eta)))
        .collect::<Result<_>>()?;
    let initial = initialize_scores(restorer, image, scales, &cfg.similarity)?;
    let states: Vec<RefinementState> = etas
        .par_iter()
        .map(|&(k, eta)| progressive_refinement(restorer, image, k, eta, &initial, cfg))
        .collect::<Result<_>>()?;
    let maps: Vec<ScoreMap> = states.iter().map(|s| s.scores.clone()).collect();
    let scores = mean_maps(&maps);
    let epsilon = states.iter().map(|s| s.epsilon).sum::<f64>() / states.len() as f64;
    Ok(DetectionResult {
        scales: states,
        scores,
        epsilon,
    })
}

#[cfg(test)]
mod tests;
