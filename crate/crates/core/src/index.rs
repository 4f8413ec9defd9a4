//! Gallery index: per-image global embeddings after visual calibration,
//! alongside the uncalibrated re-aggregation and the exporter's own vector.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::VisualBundle;
use crate::cve::{self, Anchor, RectifierConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::linalg::ZERO_NORM;

pub const INDEX_VERSION: u32 = 1;

/// A joint-space vector stored both as computed and unit-normalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVector {
    pub raw: Vec<f64>,
    pub unit: Vec<f64>,
}

impl JointVector {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < ZERO_NORM {
            return Err(Error::ZeroVector("gallery joint vector".into()));
        }
        let unit = raw.iter().map(|x| x / n).collect();
        Ok(JointVector { raw, unit })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub image_id: String,
    /// Global embedding re-aggregated after rectification (equal to
    /// `recomputed` when the visual stage is disabled).
    pub calibrated: JointVector,
    /// Global embedding re-aggregated from the untouched tokens.
    pub recomputed: JointVector,
    /// The exporter's `cls_joint`.
    pub exported: JointVector,
    pub dominant_tokens: Vec<usize>,
}

/// Which stored vector a retrieval run compares against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryVectors {
    #[default]
    Calibrated,
    Recomputed,
    Exported,
}

impl fmt::Display for GalleryVectors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GalleryVectors::Calibrated => "calibrated",
            GalleryVectors::Recomputed => "recomputed",
            GalleryVectors::Exported => "exported",
        })
    }
}

impl FromStr for GalleryVectors {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calibrated" => Ok(GalleryVectors::Calibrated),
            "recomputed" => Ok(GalleryVectors::Recomputed),
            "exported" => Ok(GalleryVectors::Exported),
            other => Err(Error::InvalidConfig(format!(
                "unknown gallery vector set `{other}`"
            ))),
        }
    }
}

impl GalleryEntry {
    pub fn vector(&self, which: GalleryVectors) -> &JointVector {
        match which {
            GalleryVectors::Calibrated => &self.calibrated,
            GalleryVectors::Recomputed => &self.recomputed,
            GalleryVectors::Exported => &self.exported,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub rectifier: RectifierConfig,
    pub disable_cve: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryIndex {
    pub version: u32,
    pub joint_dim: usize,
    pub config: IndexConfig,
    pub entries: Vec<GalleryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub count: usize,
    pub images_with_dominant: usize,
    /// Fraction of images with a non-empty dominant set.
    pub dominant_rate: f64,
    pub mean_dominant_tokens: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

/// Calibrates one image against its own patch centroid. The index is built
/// before any query is seen, so the query-conditioned anchor is unavailable.
pub fn index_entry(visual: &VisualBundle, cfg: &IndexConfig) -> Result<GalleryEntry> {
    let recomputed = cve::recompute_global(visual)?;
    let (calibrated, dominant_tokens) = if cfg.disable_cve {
        (recomputed.global_joint.clone(), Vec::new())
    } else {
        let cal = cve::calibrate_image(visual, Anchor::PatchCentroid, &cfg.rectifier)?;
        (cal.rectified.global_joint, cal.report.dominant)
    };
    Ok(GalleryEntry {
        image_id: visual.image_id.clone(),
        calibrated: JointVector::new(calibrated.to_vec())?,
        recomputed: JointVector::new(recomputed.global_joint.to_vec())?,
        exported: JointVector::new(visual.cls_joint.to_vec())?,
        dominant_tokens,
    })
}

impl GalleryIndex {
    /// Builds the index; entries are ordered by image id.
    pub fn build(visuals: &[VisualBundle], cfg: &IndexConfig, exec: Execution) -> Result<Self> {
        cfg.rectifier.validate()?;
        let first = visuals.first().ok_or(Error::EmptyGallery)?;
        let joint_dim = first.joint_dim();
        if let Some(v) = visuals.iter().find(|v| v.joint_dim() != joint_dim) {
            return Err(Error::DimensionMismatch(format!(
                "image `{}` has joint dimension {}, gallery uses {}",
                v.image_id,
                v.joint_dim(),
                joint_dim
            )));
        }
        let mut entries = exec.try_map(visuals, |v| index_entry(v, cfg))?;
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let index = GalleryIndex {
            version: INDEX_VERSION,
            joint_dim,
            config: *cfg,
            entries,
        };
        index.check_ids()?;
        Ok(index)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::DuplicateId(e.image_id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn summary(&self) -> IndexSummary {
        let count = self.entries.len();
        let with = self
            .entries
            .iter()
            .filter(|e| !e.dominant_tokens.is_empty())
            .count();
        let total: usize = self.entries.iter().map(|e| e.dominant_tokens.len()).sum();
        IndexSummary {
            count,
            images_with_dominant: with,
            dominant_rate: if count == 0 {
                0.0
            } else {
                with as f64 / count as f64
            },
            mean_dominant_tokens: if count == 0 {
                0.0
            } else {
                total as f64 / count as f64
            },
            skipped: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: GalleryIndex = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if index.version != INDEX_VERSION {
            return Err(Error::ManifestVersionUnsupported {
                found: index.version,
                expected: INDEX_VERSION,
            });
        }
        index.check_ids()?;
        for e in &index.entries {
            for which in [
                GalleryVectors::Calibrated,
                GalleryVectors::Recomputed,
                GalleryVectors::Exported,
            ] {
                let v = e.vector(which);
                if v.raw.len() != index.joint_dim || v.unit.len() != index.joint_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "entry `{}` {which} vector does not have {} dims",
                        e.image_id, index.joint_dim
                    )));
                }
            }
        }
        Ok(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Grid;
    use ndarray::{Array1, Array2};

    fn image(id: &str, spike: Option<usize>) -> VisualBundle {
        let n = 9;
        let mut attention = vec![1.0; n];
        if let Some(s) = spike {
            attention[s] = 10.0;
        }
        let total: f64 = attention.iter().sum();
        let tokens = Array2::from_shape_fn((n, 3), |(i, j)| {
            if Some(i) == spike {
                [0.0, 0.0, 1.0][j]
            } else {
                [1.0, 0.1 * i as f64, 0.0][j]
            }
        });
        VisualBundle {
            image_id: id.into(),
            patch_tokens: tokens,
            cls_attention: Array1::from(attention.iter().map(|a| a / total).collect::<Vec<_>>()),
            cls_joint: Array1::from(vec![1.0, 0.0, 0.0]),
            grid: Grid::new(3, 3),
            visual_projection: Array2::eye(3),
            audit: None,
            provenance: None,
        }
    }

    #[test]
    fn build_orders_and_counts() {
        let imgs = vec![image("b", None), image("a", Some(4)), image("c", None)];
        let idx =
            GalleryIndex::build(&imgs, &IndexConfig::default(), Execution::default()).unwrap();
        let ids: Vec<_> = idx.entries.iter().map(|e| e.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let s = idx.summary();
        assert_eq!(s.count, 3);
        assert_eq!(s.images_with_dominant, 1);
        assert_eq!(idx.entries[0].dominant_tokens, vec![4]);
    }

    #[test]
    fn disabled_stage_keeps_recomputed_vector() {
        let imgs = vec![image("a", Some(4))];
        let cfg = IndexConfig {
            disable_cve: true,
            ..Default::default()
        };
        let idx = GalleryIndex::build(&imgs, &cfg, Execution::Sequential).unwrap();
        assert_eq!(idx.entries[0].calibrated, idx.entries[0].recomputed);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let imgs = vec![image("a", None), image("a", None)];
        assert!(matches!(
            GalleryIndex::build(&imgs, &IndexConfig::default(), Execution::Sequential),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let imgs = vec![image("a", Some(0)), image("b", None)];
        let idx =
            GalleryIndex::build(&imgs, &IndexConfig::default(), Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.json");
        idx.save(&p).unwrap();
        assert_eq!(GalleryIndex::load(&p).unwrap(), idx);
    }

    #[test]
    fn unit_vectors_are_normalised() {
        let jv = JointVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(jv.unit, vec![0.6, 0.8]);
        assert!(JointVector::new(vec![0.0, 0.0]).is_err());
    }
}
