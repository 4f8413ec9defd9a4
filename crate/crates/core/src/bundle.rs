//! In-memory feature bundles exported from a dual-encoder model.
//!
//! Tensors are stored on disk as f32 and widened to f64 on load; every value
//! held here is therefore exactly representable as f32 and writes back
//! bit-identically.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on the `[CLS]` attention row summing to one.
pub const ATTENTION_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Grid { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// Last-layer attention inputs optionally dumped by the exporter for auditing
/// the `[CLS]` aggregation. Never used by the calibration pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditTensors {
    pub q_cls: Array1<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    /// The exporter's own attention output for the `[CLS]` query, if dumped.
    pub cls_output: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualBundle {
    pub image_id: String,
    /// `[N × d]` final-layer patch token states.
    pub patch_tokens: Array2<f64>,
    /// `[N]` head-averaged `[CLS]`→patch attention.
    pub cls_attention: Array1<f64>,
    /// `[d_j]` global image embedding in the joint space.
    pub cls_joint: Array1<f64>,
    pub grid: Grid,
    /// `[d × d_j]`.
    pub visual_projection: Array2<f64>,
    pub audit: Option<AuditTensors>,
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBundle {
    pub query_id: String,
    /// `[n × d_t]` final-layer subword states, `[EOT]` excluded.
    pub token_embeddings: Array2<f64>,
    pub token_strings: Vec<String>,
    /// `[L × n]` per-layer `[EOT]`→subword attention.
    pub eot_attention: Array2<f64>,
    /// `[L]` per-layer 2-norm of the `[EOT]` hidden state.
    pub eot_norms: Array1<f64>,
    /// `[d_j]` global query embedding in the joint space.
    pub eot_joint: Array1<f64>,
    /// `[d_t × d_j]`.
    pub text_projection: Array2<f64>,
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bundle {
    Visual(VisualBundle),
    Text(TextBundle),
}

impl Bundle {
    pub fn id(&self) -> &str {
        match self {
            Bundle::Visual(v) => &v.image_id,
            Bundle::Text(t) => &t.query_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Bundle::Visual(v) => v.validate(),
            Bundle::Text(t) => t.validate(),
        }
    }
}

fn shape_err(tensor: &str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        tensor: tensor.to_string(),
        detail: detail.into(),
    }
}

fn check_finite<'a>(tensor: &str, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    match values.into_iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFiniteValue {
            tensor: tensor.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

impl VisualBundle {
    pub fn num_patches(&self) -> usize {
        self.patch_tokens.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.patch_tokens.ncols()
    }

    pub fn joint_dim(&self) -> usize {
        self.visual_projection.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if n == 0 {
            return Err(shape_err("patch_tokens", "grid has no cells"));
        }
        if self.patch_tokens.nrows() != n {
            return Err(shape_err(
                "patch_tokens",
                format!(
                    "{} rows but grid {}x{} has {} cells",
                    self.patch_tokens.nrows(),
                    self.grid.rows,
                    self.grid.cols,
                    n
                ),
            ));
        }
        if self.cls_attention.len() != n {
            return Err(shape_err(
                "cls_attention",
                format!(
                    "length {} but grid has {} cells",
                    self.cls_attention.len(),
                    n
                ),
            ));
        }
        if self.visual_projection.nrows() != self.token_dim() {
            return Err(shape_err(
                "visual_projection",
                format!(
                    "{} rows but token dimension is {}",
                    self.visual_projection.nrows(),
                    self.token_dim()
                ),
            ));
        }
        if self.cls_joint.len() != self.joint_dim() {
            return Err(shape_err(
                "cls_joint",
                format!(
                    "length {} but projection maps to {}",
                    self.cls_joint.len(),
                    self.joint_dim()
                ),
            ));
        }
        check_finite("patch_tokens", self.patch_tokens.iter())?;
        check_finite("cls_attention", self.cls_attention.iter())?;
        check_finite("cls_joint", self.cls_joint.iter())?;
        check_finite("visual_projection", self.visual_projection.iter())?;

        if let Some(i) = self.cls_attention.iter().position(|&a| a < 0.0) {
            return Err(Error::InvalidAttention {
                tensor: "cls_attention".into(),
                detail: format!("entry {i} is negative ({})", self.cls_attention[i]),
            });
        }
        let total: f64 = self.cls_attention.sum();
        if (total - 1.0).abs() > ATTENTION_SUM_TOL {
            return Err(Error::InvalidAttention {
                tensor: "cls_attention".into(),
                detail: format!("sums to {total}, expected 1 within {ATTENTION_SUM_TOL:e}"),
            });
        }

        if let Some(audit) = &self.audit {
            audit.validate(n)?;
        }
        Ok(())
    }
}

impl AuditTensors {
    fn validate(&self, num_patches: usize) -> Result<()> {
        if self.keys.nrows() != num_patches {
            return Err(shape_err(
                "keys",
                format!("{} rows, expected {}", self.keys.nrows(), num_patches),
            ));
        }
        if self.values.nrows() != num_patches {
            return Err(shape_err(
                "values",
                format!("{} rows, expected {}", self.values.nrows(), num_patches),
            ));
        }
        if self.q_cls.len() != self.keys.ncols() {
            return Err(shape_err(
                "q_cls",
                format!(
                    "length {} but keys have width {}",
                    self.q_cls.len(),
                    self.keys.ncols()
                ),
            ));
        }
        if let Some(out) = &self.cls_output {
            if out.len() != self.values.ncols() {
                return Err(shape_err(
                    "cls_output",
                    format!(
                        "length {} but values have width {}",
                        out.len(),
                        self.values.ncols()
                    ),
                ));
            }
            check_finite("cls_output", out.iter())?;
        }
        check_finite("q_cls", self.q_cls.iter())?;
        check_finite("keys", self.keys.iter())?;
        check_finite("values", self.values.iter())?;
        Ok(())
    }
}

impl TextBundle {
    pub fn num_tokens(&self) -> usize {
        self.token_embeddings.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.eot_attention.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.token_embeddings.ncols()
    }

    pub fn joint_dim(&self) -> usize {
        self.text_projection.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_tokens();
        let layers = self.num_layers();
        if n == 0 {
            return Err(shape_err("token_embeddings", "query has no tokens"));
        }
        if layers == 0 {
            return Err(shape_err("eot_attention", "at least one layer is required"));
        }
        if self.eot_attention.ncols() != n {
            return Err(shape_err(
                "eot_attention",
                format!(
                    "{} columns but there are {} tokens",
                    self.eot_attention.ncols(),
                    n
                ),
            ));
        }
        if self.eot_norms.len() != layers {
            return Err(shape_err(
                "eot_norms",
                format!(
                    "length {} but eot_attention has {} layers",
                    self.eot_norms.len(),
                    layers
                ),
            ));
        }
        if self.text_projection.nrows() != self.token_dim() {
            return Err(shape_err(
                "text_projection",
                format!(
                    "{} rows but token dimension is {}",
                    self.text_projection.nrows(),
                    self.token_dim()
                ),
            ));
        }
        if self.eot_joint.len() != self.joint_dim() {
            return Err(shape_err(
                "eot_joint",
                format!(
                    "length {} but projection maps to {}",
                    self.eot_joint.len(),
                    self.joint_dim()
                ),
            ));
        }
        if !self.token_strings.is_empty() && self.token_strings.len() != n {
            return Err(shape_err(
                "token_strings",
                format!("{} strings for {} tokens", self.token_strings.len(), n),
            ));
        }
        check_finite("token_embeddings", self.token_embeddings.iter())?;
        check_finite("eot_attention", self.eot_attention.iter())?;
        check_finite("eot_norms", self.eot_norms.iter())?;
        check_finite("eot_joint", self.eot_joint.iter())?;
        check_finite("text_projection", self.text_projection.iter())?;

        if let Some(pos) = self
            .eot_attention
            .iter()
            .position(|a| !(0.0..=1.0).contains(a))
        {
            return Err(Error::InvalidAttention {
                tensor: "eot_attention".into(),
                detail: format!(
                    "entry at flat index {pos} is {} (must lie in [0, 1])",
                    self.eot_attention
                        .as_slice()
                        .map(|s| s[pos])
                        .unwrap_or(f64::NAN)
                ),
            });
        }
        if let Some((index, &value)) = self.eot_norms.iter().enumerate().find(|(_, &g)| g <= 0.0) {
            return Err(Error::NonPositiveNorm { index, value });
        }
        Ok(())
    }
}

/// Recomputes the `[CLS]` attention output `softmax(q·Kᵀ/√d)·V` from the given
/// inputs and returns its distance to the bundle's reference aggregation.
///
/// The reference is the exporter's dumped `cls_output` when present, and
/// otherwise the exported attention row applied to the bundle's stored values.
pub fn validate_cls_aggregation(
    bundle: &VisualBundle,
    q_cls: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
) -> Result<f64> {
    let audit = bundle.audit.as_ref().ok_or(Error::AuditTensorsAbsent)?;
    if keys.ncols() != q_cls.len() {
        return Err(shape_err(
            "keys",
            format!(
                "width {} does not match q_cls length {}",
                keys.ncols(),
                q_cls.len()
            ),
        ));
    }
    if keys.nrows() != values.nrows() {
        return Err(shape_err(
            "values",
            format!("{} rows but keys have {}", values.nrows(), keys.nrows()),
        ));
    }
    let scale = (q_cls.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .rows()
        .into_iter()
        .map(|k| linalg::dot(q_cls, k) / scale)
        .collect();
    let weights = Array1::from(linalg::softmax(&scores));
    let recomputed = weights.dot(&values);

    let reference = match &audit.cls_output {
        Some(out) => out.clone(),
        None => {
            if audit.values.nrows() != bundle.cls_attention.len() {
                return Err(shape_err(
                    "values",
                    "row count differs from cls_attention length",
                ));
            }
            bundle.cls_attention.dot(&audit.values)
        }
    };
    if reference.len() != recomputed.len() {
        return Err(shape_err(
            "values",
            format!(
                "width {} but reference has {}",
                recomputed.len(),
                reference.len()
            ),
        ));
    }
    Ok(linalg::norm((&recomputed - &reference).view()))
}

/// Runs [`validate_cls_aggregation`] on the bundle's own audit tensors.
pub fn audit_bundle(bundle: &VisualBundle) -> Result<f64> {
    let audit = bundle.audit.as_ref().ok_or(Error::AuditTensorsAbsent)?;
    validate_cls_aggregation(
        bundle,
        audit.q_cls.view(),
        audit.keys.view(),
        audit.values.view(),
    )
}
