//! Two-stage retrieval: rank the gallery by global similarity, then re-score
//! the top-k candidates with a blend of global and discriminative similarity.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::dcc::CalibratedQuery;
use crate::error::{Error, Result};
use crate::index::{GalleryIndex, GalleryVectors};
use crate::linalg::{self, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Weight of the global similarity; `1 - lambda` goes to the
    /// discriminative similarity.
    pub lambda: f64,
    /// Candidate pool size.
    pub k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda: 0.5,
            k: 100,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub base_sim: f64,
    /// Present only for candidates inside the re-scored pool.
    pub disc_sim: Option<f64>,
    /// Fused score inside the pool, base similarity outside it.
    pub fused_score: f64,
}

/// Full gallery ranking for one query: the re-scored pool first, ordered by
/// fused score, then the remaining items in base-similarity order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankingResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }
}

fn unit(v: ArrayView1<f64>, what: &str) -> Result<Vec<f64>> {
    Ok(linalg::normalize(v, what)?.to_vec())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of the query's global embedding to every gallery item.
pub fn base_similarity(
    text_global: ArrayView1<f64>,
    gallery: &GalleryIndex,
    which: GalleryVectors,
) -> Result<Vec<f64>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if text_global.len() != gallery.joint_dim {
        return Err(Error::DimensionMismatch(format!(
            "query embedding has {} dims, gallery has {}",
            text_global.len(),
            gallery.joint_dim
        )));
    }
    let t = unit(text_global, "query global embedding")?;
    Ok(gallery
        .entries
        .iter()
        .map(|e| dot(&t, &e.vector(which).unit))
        .collect())
}

/// Descending by score, ascending by id on ties.
fn by_score_then_id<'a>(
    scores: &'a [f64],
    ids: &'a [&'a str],
) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ids[a].cmp(ids[b]))
    }
}

/// Indices of the `k` highest scores (all of them when the gallery is
/// smaller), best first.
pub fn topk_candidates(sims: &[f64], ids: &[&str], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    let cmp = by_score_then_id(sims, ids);
    if k < order.len() {
        order.select_nth_unstable_by(k, &cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(&cmp);
    order
}

fn gallery_ids(gallery: &GalleryIndex) -> Vec<&str> {
    gallery
        .entries
        .iter()
        .map(|e| e.image_id.as_str())
        .collect()
}

/// Ranking by global similarity alone.
pub fn rank_base(
    query_id: &str,
    text_global: ArrayView1<f64>,
    gallery: &GalleryIndex,
    which: GalleryVectors,
) -> Result<RankingResult> {
    let sims = base_similarity(text_global, gallery, which)?;
    let ids = gallery_ids(gallery);
    let order = topk_candidates(&sims, &ids, sims.len());
    Ok(RankingResult {
        query_id: query_id.to_string(),
        entries: order
            .into_iter()
            .map(|i| RankedEntry {
                image_id: ids[i].to_string(),
                base_sim: sims[i],
                disc_sim: None,
                fused_score: sims[i],
            })
            .collect(),
    })
}

/// Selects the top-k pool by global similarity, re-scores it as
/// `lambda · base + (1 - lambda) · disc`, and appends the rest of the
/// gallery in base order.
pub fn fuse_and_rank(
    query: &CalibratedQuery,
    text_global: ArrayView1<f64>,
    gallery: &GalleryIndex,
    which: GalleryVectors,
    cfg: &FusionConfig,
) -> Result<RankingResult> {
    cfg.validate()?;
    if query.disc_joint.len() != gallery.joint_dim {
        return Err(Error::DimensionMismatch(format!(
            "discriminative token has {} dims, gallery has {}",
            query.disc_joint.len(),
            gallery.joint_dim
        )));
    }
    let disc_norm = linalg::norm(query.disc_joint.view());
    if disc_norm < ZERO_NORM {
        return Err(Error::ZeroVector("discriminative token".into()));
    }
    if (disc_norm - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "discriminative token must be unit-norm, has norm {disc_norm}"
        )));
    }
    let sims = base_similarity(text_global, gallery, which)?;
    let ids = gallery_ids(gallery);
    let full = topk_candidates(&sims, &ids, sims.len());
    let k = cfg.k.min(full.len());
    let (pool, rest) = full.split_at(k);

    let disc = query.disc_joint.as_slice().expect("contiguous");
    let mut fused = vec![0.0; sims.len()];
    let mut disc_sims = vec![None; sims.len()];
    for &i in pool {
        let d = dot(disc, &gallery.entries[i].vector(which).unit);
        disc_sims[i] = Some(d);
        fused[i] = cfg.lambda * sims[i] + (1.0 - cfg.lambda) * d;
    }
    let mut reranked = pool.to_vec();
    reranked.sort_unstable_by(by_score_then_id(&fused, &ids));

    let entry = |i: usize, fused_score: f64| RankedEntry {
        image_id: ids[i].to_string(),
        base_sim: sims[i],
        disc_sim: disc_sims[i],
        fused_score,
    };
    let mut entries: Vec<RankedEntry> = reranked.iter().map(|&i| entry(i, fused[i])).collect();
    entries.extend(rest.iter().map(|&i| entry(i, sims[i])));
    Ok(RankingResult {
        query_id: query.query_id.clone(),
        entries,
    })
}

pub const RECALL_CUTOFFS: [usize; 4] = [1, 5, 10, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_at_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    #[serde(rename = "recall@50")]
    pub recall_at_50: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
}

pub type Relevance = BTreeMap<String, BTreeSet<String>>;

/// Average precision of one ranking over its full length.
pub fn average_precision<'a>(
    ranking: impl IntoIterator<Item = &'a str>,
    relevant: &BTreeSet<String>,
) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, id) in ranking.into_iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

/// Recall@K (fraction of queries with a relevant item in the top K) and mAP.
pub fn evaluate(results: &[RankingResult], relevance: &Relevance) -> Result<Metrics> {
    let mut hits = [0usize; RECALL_CUTOFFS.len()];
    let mut ap_sum = 0.0;
    for result in results {
        let relevant = relevance
            .get(&result.query_id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::MissingRelevance(result.query_id.clone()))?;
        let first_hit = result.ids().position(|id| relevant.contains(id));
        for (slot, &cutoff) in hits.iter_mut().zip(&RECALL_CUTOFFS) {
            if first_hit.is_some_and(|r| r < cutoff) {
                *slot += 1;
            }
        }
        ap_sum += average_precision(result.ids(), relevant);
    }
    let n = results.len();
    let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Metrics {
        recall_at_1: frac(hits[0]),
        recall_at_5: frac(hits[1]),
        recall_at_10: frac(hits[2]),
        recall_at_50: frac(hits[3]),
        map: if n == 0 { 0.0 } else { ap_sum / n as f64 },
        num_queries: n,
    })
}
