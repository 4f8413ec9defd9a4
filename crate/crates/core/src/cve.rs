//! Contrastive visual enhancement: split patches into target and background
//! by similarity to an anchor embedding, find background tokens whose
//! `[CLS]` attention stands out from their 8-connected neighbourhood, and
//! damp those tokens before re-aggregating the global image embedding.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::bundle::{Grid, VisualBundle};
use crate::error::{Error, Result};
use crate::linalg::{self, ZERO_NORM};

/// Statistic of the patch–anchor similarity vector used as the region threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStrategy {
    #[default]
    Mean,
    MeanPlusStd,
    Median,
}

impl ThresholdStrategy {
    pub fn threshold(self, values: &[f64]) -> f64 {
        match self {
            ThresholdStrategy::Mean => linalg::mean(values),
            ThresholdStrategy::MeanPlusStd => linalg::mean(values) + linalg::population_std(values),
            ThresholdStrategy::Median => linalg::median(values),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdStrategy::Mean => "mean",
            ThresholdStrategy::MeanPlusStd => "mean_plus_std",
            ThresholdStrategy::Median => "median",
        }
    }
}

impl fmt::Display for ThresholdStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ThresholdStrategy::Mean),
            "mean_plus_std" => Ok(ThresholdStrategy::MeanPlusStd),
            "median" => Ok(ThresholdStrategy::Median),
            other => Err(Error::InvalidConfig(format!(
                "unknown threshold strategy `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifierConfig {
    /// Residual gain applied to dominant tokens.
    pub eta: f64,
    pub threshold_strategy: ThresholdStrategy,
    /// Added to the neighbourhood standard deviation in the contrast score.
    pub epsilon: f64,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        RectifierConfig {
            eta: 0.1,
            threshold_strategy: ThresholdStrategy::Mean,
            epsilon: 1e-6,
        }
    }
}

impl RectifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Target/background partition of the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    /// `true` marks the target region.
    pub mask: Vec<bool>,
    pub similarity_threshold: f64,
    pub similarities: Vec<f64>,
}

impl RegionMask {
    pub fn target(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn background(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    /// Everything is target; used when the visual stage is disabled.
    pub fn all_target(n: usize) -> Self {
        RegionMask {
            mask: vec![true; n],
            similarity_threshold: f64::NEG_INFINITY,
            similarities: Vec::new(),
        }
    }
}

/// Reference embedding the patches are compared against when splitting regions.
#[derive(Debug, Clone, Copy)]
pub enum Anchor<'a> {
    /// The query's global text embedding.
    Text(ArrayView1<'a, f64>),
    /// The unweighted mean of the projected patches. Query-independent, so
    /// a gallery can be calibrated once at index time.
    PatchCentroid,
}

/// Patch tokens mapped into the joint space, one row per patch.
pub fn project_patches(visual: &VisualBundle) -> Array2<f64> {
    visual.patch_tokens.dot(&visual.visual_projection)
}

fn split(similarities: Vec<f64>, strategy: ThresholdStrategy) -> RegionMask {
    let similarity_threshold = strategy.threshold(&similarities);
    RegionMask {
        mask: similarities
            .iter()
            .map(|&s| s >= similarity_threshold)
            .collect(),
        similarity_threshold,
        similarities,
    }
}

fn similarities_to(projected: &Array2<f64>, anchor: ArrayView1<f64>) -> Result<Vec<f64>> {
    let anchor_norm = linalg::norm(anchor);
    if anchor_norm < ZERO_NORM {
        return Err(Error::ZeroVector("region anchor".into()));
    }
    projected
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let n = linalg::norm(p);
            if n < ZERO_NORM {
                return Err(Error::ZeroVector(format!("projected patch {i}")));
            }
            Ok(linalg::dot(p, anchor) / (n * anchor_norm))
        })
        .collect()
}

/// Splits the patches by cosine similarity to the query's global embedding.
/// Patches at or above the threshold form the target region.
pub fn decouple_regions(
    visual: &VisualBundle,
    text_global: ArrayView1<f64>,
    cfg: &RectifierConfig,
) -> Result<RegionMask> {
    decouple_with_anchor(visual, Anchor::Text(text_global), cfg)
}

pub fn decouple_with_anchor(
    visual: &VisualBundle,
    anchor: Anchor<'_>,
    cfg: &RectifierConfig,
) -> Result<RegionMask> {
    let projected = project_patches(visual);
    let sims = match anchor {
        Anchor::Text(t) => {
            if t.len() != visual.joint_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "text embedding has {} dims, image joint space has {}",
                    t.len(),
                    visual.joint_dim()
                )));
            }
            similarities_to(&projected, t)?
        }
        Anchor::PatchCentroid => {
            let centroid = projected.mean_axis(Axis(0)).expect("grid is non-empty");
            similarities_to(&projected, centroid.view())?
        }
    };
    Ok(split(sims, cfg.threshold_strategy))
}

/// In-bounds 8-connected neighbours of a grid cell.
#[derive(Debug, Clone, Copy)]
pub struct Neighborhood {
    cells: [usize; 8],
    len: usize,
}

impl Neighborhood {
    pub fn of(grid: Grid, index: usize) -> Self {
        let (r, c) = grid.position(index);
        let mut cells = [0usize; 8];
        let mut len = 0;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < grid.rows && (nc as usize) < grid.cols {
                    cells[len] = grid.index(nr as usize, nc as usize);
                    len += 1;
                }
            }
        }
        Neighborhood { cells, len }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.cells[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Local attention deviation: each cell's attention as a z-score against its
/// 8-connected neighbourhood, using the population standard deviation plus
/// `epsilon`. A cell without neighbours scores zero.
pub fn local_contrast(attention: &[f64], grid: Grid, epsilon: f64) -> Result<Vec<f64>> {
    if attention.len() != grid.len() {
        return Err(Error::GridMismatch {
            len: attention.len(),
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    let mut offsets = [0f64; 8];
    Ok((0..grid.len())
        .map(|i| {
            let hood = Neighborhood::of(grid, i);
            if hood.is_empty() {
                return 0.0;
            }
            let cells = hood.as_slice();
            let pivot = attention[cells[0]];
            let k = cells.len() as f64;
            // Offsets from one neighbour keep a flat neighbourhood at exactly
            // zero spread, and a flat grid at exactly zero contrast.
            for (slot, &j) in offsets.iter_mut().zip(cells) {
                *slot = attention[j] - pivot;
            }
            let offsets = &offsets[..cells.len()];
            let mean_offset = offsets.iter().sum::<f64>() / k;
            let var = offsets
                .iter()
                .map(|o| (o - mean_offset).powi(2))
                .sum::<f64>()
                / k;
            ((attention[i] - pivot) - mean_offset) / (var.sqrt() + epsilon)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominantReport {
    pub lc: Vec<f64>,
    /// `lc · attention` per token.
    pub combined: Vec<f64>,
    /// Sorted token indices.
    pub dominant: Vec<usize>,
    pub neighbor_degree: Vec<usize>,
}

impl DominantReport {
    pub fn empty(n: usize) -> Self {
        DominantReport {
            lc: vec![0.0; n],
            combined: vec![0.0; n],
            dominant: Vec::new(),
            neighbor_degree: vec![0; n],
        }
    }
}

/// Background tokens whose contrast score strictly exceeds that of every
/// neighbour.
pub fn detect_dominant(
    visual: &VisualBundle,
    mask: &RegionMask,
    cfg: &RectifierConfig,
) -> Result<DominantReport> {
    let attention = visual
        .cls_attention
        .as_slice()
        .expect("attention vector is contiguous");
    if mask.mask.len() != attention.len() {
        return Err(Error::DimensionMismatch(format!(
            "region mask covers {} tokens, bundle has {}",
            mask.mask.len(),
            attention.len()
        )));
    }
    let lc = local_contrast(attention, visual.grid, cfg.epsilon)?;
    let combined = lc.iter().zip(attention).map(|(l, a)| l * a).collect();
    let mut neighbor_degree = Vec::with_capacity(lc.len());
    let mut dominant = Vec::new();
    for i in 0..lc.len() {
        let hood = Neighborhood::of(visual.grid, i);
        neighbor_degree.push(hood.len());
        let is_peak = !hood.is_empty() && hood.as_slice().iter().all(|&j| lc[i] > lc[j]);
        if is_peak && !mask.mask[i] {
            dominant.push(i);
        }
    }
    Ok(DominantReport {
        lc,
        combined,
        dominant,
        neighbor_degree,
    })
}

/// Per-token gain: `eta` for dominant tokens, one otherwise.
pub fn gates(n: usize, dominant: &[usize], eta: f64) -> Vec<f64> {
    let mut g = vec![1.0; n];
    for &i in dominant {
        g[i] = eta;
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rectified {
    /// `[N × d]` gated patch tokens.
    pub patch_tokens: Array2<f64>,
    pub gates: Vec<f64>,
    /// Gated `[CLS]` attention renormalised to sum to one.
    pub weights: Vec<f64>,
    /// Re-aggregated global embedding in the joint space, before normalisation.
    pub global_joint: Array1<f64>,
    /// Unit-norm `global_joint`.
    pub cls_joint_rect: Array1<f64>,
}

fn aggregate(visual: &VisualBundle, gates: Vec<f64>) -> Result<Rectified> {
    let mut patch_tokens = visual.patch_tokens.clone();
    for (mut row, &g) in patch_tokens.rows_mut().into_iter().zip(&gates) {
        if g != 1.0 {
            row.mapv_inplace(|x| g * x);
        }
    }
    let gated: Vec<f64> = visual
        .cls_attention
        .iter()
        .zip(&gates)
        .map(|(a, g)| a * g)
        .collect();
    let mass: f64 = gated.iter().sum();
    if mass < 1e-12 {
        return Err(Error::DegenerateAttention { mass });
    }
    let weights: Vec<f64> = gated.iter().map(|w| w / mass).collect();
    let pooled = Array1::from(weights.clone()).dot(&patch_tokens);
    let global_joint = linalg::project(pooled.view(), &visual.visual_projection);
    let cls_joint_rect = linalg::normalize(global_joint.view(), "re-aggregated global embedding")?;
    Ok(Rectified {
        patch_tokens,
        gates,
        weights,
        global_joint,
        cls_joint_rect,
    })
}

/// Gates the dominant tokens and re-aggregates the global embedding from the
/// gated tokens and renormalised gated attention.
pub fn rectify(
    visual: &VisualBundle,
    report: &DominantReport,
    cfg: &RectifierConfig,
) -> Result<Rectified> {
    aggregate(
        visual,
        gates(visual.num_patches(), &report.dominant, cfg.eta),
    )
}

/// The global embedding re-aggregated from unmodified tokens (all gates one).
pub fn recompute_global(visual: &VisualBundle) -> Result<Rectified> {
    aggregate(visual, vec![1.0; visual.num_patches()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCalibration {
    pub mask: RegionMask,
    pub report: DominantReport,
    pub rectified: Rectified,
}

/// Runs region splitting, dominant-token detection and rectification.
pub fn calibrate_image(
    visual: &VisualBundle,
    anchor: Anchor<'_>,
    cfg: &RectifierConfig,
) -> Result<ImageCalibration> {
    cfg.validate()?;
    let mask = decouple_with_anchor(visual, anchor, cfg)?;
    let report = detect_dominant(visual, &mask, cfg)?;
    let rectified = rectify(visual, &report, cfg)?;
    Ok(ImageCalibration {
        mask,
        report,
        rectified,
    })
}
