//! Batch retrieval over a prepared gallery index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bundle::TextBundle;
use crate::dcc::{self, TextThreshold};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::index::{GalleryIndex, GalleryVectors};
use crate::rerank::{self, FusionConfig, RankingResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub fusion: FusionConfig,
    pub text_threshold: TextThreshold,
    pub disable_dcc: bool,
    pub gallery_vectors: GalleryVectors,
}

pub fn retrieve_one(
    text: &TextBundle,
    index: &GalleryIndex,
    cfg: &RetrievalConfig,
) -> Result<RankingResult> {
    if text.eot_joint.len() != index.joint_dim {
        return Err(Error::DimensionMismatch(format!(
            "query `{}` has joint dimension {}, index has {}",
            text.query_id,
            text.eot_joint.len(),
            index.joint_dim
        )));
    }
    if cfg.disable_dcc {
        return rerank::rank_base(
            &text.query_id,
            text.eot_joint.view(),
            index,
            cfg.gallery_vectors,
        );
    }
    let calibrated = dcc::calibrate_query(text, cfg.text_threshold)?;
    rerank::fuse_and_rank(
        &calibrated,
        text.eot_joint.view(),
        index,
        cfg.gallery_vectors,
        &cfg.fusion,
    )
}

/// Ranks the gallery for every query. Results are ordered by query id
/// regardless of how the work was scheduled.
pub fn retrieve(
    queries: &[TextBundle],
    index: &GalleryIndex,
    cfg: &RetrievalConfig,
    exec: Execution,
) -> Result<Vec<RankingResult>> {
    cfg.fusion.validate()?;
    if index.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut seen = BTreeSet::new();
    for q in queries {
        if !seen.insert(q.query_id.as_str()) {
            return Err(Error::DuplicateId(q.query_id.clone()));
        }
    }
    let mut results = exec.try_map(queries, |q| retrieve_one(q, index, cfg))?;
    results.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(results)
}
