//! Discriminative concept calibration for text queries.
//!
//! Subwords are split by their layer-aggregated `[EOT]` attention into a
//! general (high-attention) and a discriminative (low-attention) set. General
//! tokens are attenuated in proportion to how many discriminative tokens the
//! query carries, and a discriminative summary token is pooled from both sets
//! with parameter-free scaled dot-product attention.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::bundle::TextBundle;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextThreshold {
    #[default]
    Mean,
    Median,
}

impl TextThreshold {
    pub fn threshold(self, alpha: &[f64]) -> f64 {
        match self {
            TextThreshold::Mean => linalg::mean(alpha),
            TextThreshold::Median => linalg::median(alpha),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TextThreshold::Mean => "mean",
            TextThreshold::Median => "median",
        }
    }
}

impl fmt::Display for TextThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TextThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(TextThreshold::Mean),
            "median" => Ok(TextThreshold::Median),
            other => Err(Error::InvalidConfig(format!(
                "unknown text threshold `{other}`"
            ))),
        }
    }
}

/// Layer-weighted mean of the `[EOT]` attention rows, each layer weighted by
/// the norm of its `[EOT]` hidden state.
pub fn aggregate_attention(text: &TextBundle) -> Vec<f64> {
    let total: f64 = text.eot_norms.sum();
    let weights: Vec<f64> = text.eot_norms.iter().map(|g| g / total).collect();
    text.eot_attention
        .columns()
        .into_iter()
        .map(|col| {
            let alpha: f64 = col.iter().zip(&weights).map(|(a, w)| w * a).sum();
            // Keep the result inside the per-layer range despite rounding.
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            alpha.clamp(lo, hi)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSplit {
    pub alpha: Vec<f64>,
    pub attention_threshold: f64,
    /// Tokens with `alpha >= attention_threshold`, ascending.
    pub general: Vec<usize>,
    /// Tokens with `alpha < attention_threshold`, ascending.
    pub discriminative: Vec<usize>,
}

pub fn split_subspaces(alpha: &[f64], strategy: TextThreshold) -> SubspaceSplit {
    let attention_threshold = strategy.threshold(alpha);
    let (general, discriminative) =
        (0..alpha.len()).partition(|&i| alpha[i] >= attention_threshold);
    SubspaceSplit {
        alpha: alpha.to_vec(),
        attention_threshold,
        general,
        discriminative,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modulated {
    /// `[|G| × d_t]` attenuated general tokens.
    pub attenuated: Array2<f64>,
    /// `[|D| × d_t]` discriminative tokens, unscaled.
    pub detail: Array2<f64>,
    pub detail_share: f64,
}

fn gather_rows(matrix: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    matrix.select(Axis(0), rows)
}

/// Scales every general token by `1 - m` with `m = |D| / (|G| + |D|)`.
pub fn modulate(text: &TextBundle, split: &SubspaceSplit) -> Result<Modulated> {
    let (g, d) = (split.general.len(), split.discriminative.len());
    if g + d == 0 || text.num_tokens() == 0 {
        return Err(Error::EmptyQuery);
    }
    if g + d != text.num_tokens() {
        return Err(Error::DimensionMismatch(format!(
            "split covers {} tokens, query has {}",
            g + d,
            text.num_tokens()
        )));
    }
    let detail_share = d as f64 / (g + d) as f64;
    let keep = 1.0 - detail_share;
    let mut attenuated = gather_rows(&text.token_embeddings, &split.general);
    if keep != 1.0 {
        attenuated.mapv_inplace(|x| keep * x);
    }
    let detail = gather_rows(&text.token_embeddings, &split.discriminative);
    Ok(Modulated {
        attenuated,
        detail,
        detail_share,
    })
}

/// Scaled dot-product attention with identity projections for one query
/// vector. Returns the pooled output and the attention weights.
pub fn attend(query: ArrayView1<f64>, keys: &Array2<f64>) -> (Array1<f64>, Vec<f64>) {
    let scale = (keys.ncols() as f64).sqrt();
    let scores: Vec<f64> = keys
        .rows()
        .into_iter()
        .map(|k| linalg::dot(query, k) / scale)
        .collect();
    let weights = linalg::softmax(&scores);
    let pooled = Array1::from(weights.clone()).dot(keys);
    (pooled, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminativeToken {
    /// Self-attention output at the summary position.
    pub summary: Array1<f64>,
    pub disc_token: Array1<f64>,
    /// Unit-norm projection of `disc_token` into the joint space.
    pub disc_joint: Array1<f64>,
    /// Cross-attention weights over the rows of `[attenuated; detail]`.
    pub cross_weights: Vec<f64>,
}

/// Builds the discriminative token.
///
/// The summary token starts as the mean of `[attenuated; detail]`, attends over
/// `[r; attenuated; detail]`, and its output then attends over `[attenuated; detail]` alone.
pub fn build_discriminative_token(
    attenuated: &Array2<f64>,
    detail: &Array2<f64>,
    text: &TextBundle,
) -> Result<DiscriminativeToken> {
    if attenuated.nrows() + detail.nrows() == 0 {
        return Err(Error::EmptyQuery);
    }
    let tokens = concatenate(Axis(0), &[attenuated.view(), detail.view()]).map_err(|e| {
        Error::DimensionMismatch(format!("general and discriminative widths differ: {e}"))
    })?;
    let r = tokens.mean_axis(Axis(0)).expect("at least one token");
    let sequence = concatenate(Axis(0), &[r.view().insert_axis(Axis(0)), tokens.view()])
        .expect("summary token has the token width");
    let (summary, _) = attend(r.view(), &sequence);
    let (disc_token, cross_weights) = attend(summary.view(), &tokens);
    if disc_token.len() != text.text_projection.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "token width {} but text projection expects {}",
            disc_token.len(),
            text.text_projection.nrows()
        )));
    }
    let joint = linalg::project(disc_token.view(), &text.text_projection);
    let disc_joint = linalg::normalize(joint.view(), "projected discriminative token")?;
    Ok(DiscriminativeToken {
        summary,
        disc_token,
        disc_joint,
        cross_weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedQuery {
    pub query_id: String,
    pub split: SubspaceSplit,
    pub attenuated: Array2<f64>,
    pub detail: Array2<f64>,
    pub detail_share: f64,
    pub disc_token: Array1<f64>,
    pub disc_joint: Array1<f64>,
}

pub fn calibrate_query(text: &TextBundle, strategy: TextThreshold) -> Result<CalibratedQuery> {
    let alpha = aggregate_attention(text);
    let split = split_subspaces(&alpha, strategy);
    let Modulated {
        attenuated,
        detail,
        detail_share,
    } = modulate(text, &split)?;
    let token = build_discriminative_token(&attenuated, &detail, text)?;
    Ok(CalibratedQuery {
        query_id: text.query_id.clone(),
        split,
        attenuated,
        detail,
        detail_share,
        disc_token: token.disc_token,
        disc_joint: token.disc_joint,
    })
}

/// Per-query debug record written by `inspect` for text bundles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceDump {
    pub query_id: String,
    pub token_strings: Vec<String>,
    pub alpha: Vec<f64>,
    pub attention_threshold: f64,
    pub threshold: TextThreshold,
    /// `true` where the token falls in the general subspace.
    pub general: Vec<bool>,
    pub general_tokens: Vec<String>,
    pub discriminative_tokens: Vec<String>,
    pub detail_share: f64,
}

impl SubspaceDump {
    pub fn new(text: &TextBundle, split: &SubspaceSplit, threshold: TextThreshold) -> Self {
        let n = split.alpha.len();
        let mut general = vec![false; n];
        for &i in &split.general {
            general[i] = true;
        }
        let name = |i: usize| {
            text.token_strings
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("#{i}"))
        };
        SubspaceDump {
            query_id: text.query_id.clone(),
            token_strings: text.token_strings.clone(),
            alpha: split.alpha.clone(),
            attention_threshold: split.attention_threshold,
            threshold,
            general,
            general_tokens: split.general.iter().map(|&i| name(i)).collect(),
            discriminative_tokens: split.discriminative.iter().map(|&i| name(i)).collect(),
            detail_share: split.discriminative.len() as f64 / n.max(1) as f64,
        }
    }
}
