//! Seeded synthetic fixtures, so the engine can be exercised end to end
//! without a model exporter.
//!
//! The distractor scenario builds a gallery where every image has a content
//! direction and a matching caption. A subset of images also carries one
//! background patch with a large share of the `[CLS]` attention whose
//! embedding points at a *different* image's content. That patch drags the
//! image's global embedding toward the wrong caption.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, Grid, TextBundle, VisualBundle};
use crate::container::write_bundle;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rerank::Relevance;

/// Rounds through f32 so in-memory fixtures equal what a reload yields.
fn f32r(x: f64) -> f64 {
    x as f32 as f64
}

fn gaussian_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_iter((0..len).map(|_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    }))
}

fn unit_vec(rng: &mut impl Rng, len: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vec(rng, len, 1.0);
        if let Ok(u) = linalg::normalize(v.view(), "random direction") {
            return u;
        }
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        f32r(z * scale)
    })
}

/// Attention vector rounded to f32; the rounding error stays far inside the
/// load-time sum tolerance.
fn rounded_attention(weights: Vec<f64>) -> Array1<f64> {
    let total: f64 = weights.iter().sum();
    Array1::from_iter(weights.into_iter().map(|w| f32r(w / total)))
}

/// Random but valid visual bundle: softmax attention over Gaussian scores.
pub fn random_visual(
    rng: &mut impl Rng,
    id: &str,
    grid: Grid,
    token_dim: usize,
    joint_dim: usize,
) -> VisualBundle {
    let n = grid.len();
    let scores: Vec<f64> = gaussian_vec(rng, n, 1.0).to_vec();
    let patch_tokens = gaussian_matrix(rng, n, token_dim, 1.0);
    let visual_projection =
        gaussian_matrix(rng, token_dim, joint_dim, 1.0 / (token_dim as f64).sqrt());
    let cls_attention = rounded_attention(linalg::softmax(&scores));
    let pooled = cls_attention.dot(&patch_tokens);
    let cls_joint = linalg::project(pooled.view(), &visual_projection).mapv(f32r);
    VisualBundle {
        image_id: id.to_string(),
        patch_tokens,
        cls_attention,
        cls_joint,
        grid,
        visual_projection,
        audit: None,
        provenance: Some("synthetic random".into()),
    }
}

/// Random but valid text bundle with `layers` attention rows over `tokens` subwords.
pub fn random_text(
    rng: &mut impl Rng,
    id: &str,
    tokens: usize,
    layers: usize,
    token_dim: usize,
    joint_dim: usize,
) -> TextBundle {
    let eot_attention =
        Array2::from_shape_simple_fn((layers, tokens), || f32r(rng.random::<f64>()));
    let eot_norms = Array1::from_iter((0..layers).map(|_| f32r(rng.random_range(0.5..8.0))));
    TextBundle {
        query_id: id.to_string(),
        token_embeddings: gaussian_matrix(rng, tokens, token_dim, 1.0),
        token_strings: (0..tokens).map(|i| format!("tok{i}")).collect(),
        eot_attention,
        eot_norms,
        eot_joint: gaussian_vec(rng, joint_dim, 1.0).mapv(f32r),
        text_projection: gaussian_matrix(
            rng,
            token_dim,
            joint_dim,
            1.0 / (token_dim as f64).sqrt(),
        ),
        provenance: Some("synthetic random".into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub items: usize,
    pub distractors: usize,
    pub grid: Grid,
    pub token_dim: usize,
    pub joint_dim: usize,
    /// Share of `[CLS]` attention captured by the spike patch.
    pub spike_attention: f64,
    /// Norm of the spike patch relative to a unit content direction.
    pub spike_scale: f64,
    /// Norm of the per-patch Gaussian perturbation.
    pub patch_noise: f64,
    /// Norm of the perturbation added to each caption's global embedding.
    pub query_noise: f64,
    pub layers: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            items: 50,
            distractors: 10,
            grid: Grid::new(7, 7),
            token_dim: 24,
            joint_dim: 16,
            spike_attention: 0.7,
            spike_scale: 3.0,
            patch_noise: 0.6,
            query_noise: 0.3,
            layers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub image_id: String,
    /// The caption the spike patch is pushed toward.
    pub lure_query_id: String,
    pub spike_index: usize,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub visuals: Vec<VisualBundle>,
    pub texts: Vec<TextBundle>,
    pub relevance: Relevance,
    pub distractors: Vec<Distractor>,
}

pub fn image_id(i: usize) -> String {
    format!("img{i:03}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:03}")
}

const GENERAL_WORDS: [&str; 2] = ["photo", "object"];
const DETAIL_WORDS: usize = 4;

/// Builds the distractor scenario. Image `i` is relevant to caption `i`;
/// images `0..distractors` carry a spike pointing at image
/// `distractors + i`'s content.
pub fn distractor_scenario(seed: u64, cfg: &ScenarioConfig) -> Result<Scenario> {
    if cfg.items == 0 || cfg.distractors * 2 > cfg.items {
        return Err(Error::InvalidConfig(format!(
            "need at least twice as many items as distractors (items {}, distractors {})",
            cfg.items, cfg.distractors
        )));
    }
    if cfg.grid.len() < 2 || !(0.0..1.0).contains(&cfg.spike_attention) {
        return Err(Error::InvalidConfig(
            "grid needs two cells and spike share must lie in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, dj, n) = (cfg.token_dim, cfg.joint_dim, cfg.grid.len());
    let projection = gaussian_matrix(&mut rng, d, dj, 1.0 / (d as f64).sqrt());
    let content: Vec<Array1<f64>> = (0..cfg.items).map(|_| unit_vec(&mut rng, d)).collect();
    let generic = unit_vec(&mut rng, dj);

    let mut visuals = Vec::with_capacity(cfg.items);
    let mut distractors = Vec::new();
    for (i, c) in content.iter().enumerate() {
        let mut tokens = Array2::zeros((n, d));
        for mut row in tokens.rows_mut() {
            let noise = gaussian_vec(&mut rng, d, cfg.patch_noise / (d as f64).sqrt());
            row.assign(&(c + &noise).mapv(f32r));
        }
        let attention = if i < cfg.distractors {
            let spike = rng.random_range(0..n);
            let lure = cfg.distractors + i;
            tokens
                .row_mut(spike)
                .assign(&content[lure].mapv(|x| f32r(cfg.spike_scale * x)));
            distractors.push(Distractor {
                image_id: image_id(i),
                lure_query_id: query_id(lure),
                spike_index: spike,
            });
            let rest = (1.0 - cfg.spike_attention) / (n - 1) as f64;
            let mut a = vec![f32r(rest); n];
            a[spike] = f32r(cfg.spike_attention);
            Array1::from(a)
        } else {
            Array1::from(vec![f32r(1.0 / n as f64); n])
        };
        let pooled = attention.dot(&tokens);
        let cls_joint = linalg::project(pooled.view(), &projection).mapv(f32r);
        visuals.push(VisualBundle {
            image_id: image_id(i),
            patch_tokens: tokens,
            cls_attention: attention,
            cls_joint,
            grid: cfg.grid,
            visual_projection: projection.clone(),
            audit: None,
            provenance: Some(format!("synthetic distractor scenario, seed {seed}")),
        });
    }

    let mut texts = Vec::with_capacity(cfg.items);
    let mut relevance = Relevance::new();
    let n_tokens = GENERAL_WORDS.len() + DETAIL_WORDS;
    for (i, c) in content.iter().enumerate() {
        let target = linalg::normalize(linalg::project(c.view(), &projection).view(), "content")?;
        let mut embeddings = Array2::zeros((n_tokens, dj));
        let mut strings = Vec::with_capacity(n_tokens);
        let mut attention = Array2::zeros((cfg.layers, n_tokens));
        for t in 0..n_tokens {
            let general = t < GENERAL_WORDS.len();
            let base = if general { &generic } else { &target };
            let noise = gaussian_vec(&mut rng, dj, 0.3 / (dj as f64).sqrt());
            embeddings.row_mut(t).assign(&(base + &noise).mapv(f32r));
            strings.push(if general {
                GENERAL_WORDS[t].to_string()
            } else {
                format!("detail{}_{}", i, t - GENERAL_WORDS.len())
            });
            for l in 0..cfg.layers {
                let a: f64 = if general {
                    rng.random_range(0.25..0.35)
                } else {
                    rng.random_range(0.02..0.08)
                };
                attention[[l, t]] = f32r(a);
            }
        }
        let noise = gaussian_vec(&mut rng, dj, cfg.query_noise / (dj as f64).sqrt());
        let eot = (&target + &generic.mapv(|x| 0.5 * x) + &noise).mapv(f32r);
        let norms = Array1::from_iter((0..cfg.layers).map(|_| f32r(rng.random_range(1.0..5.0))));
        texts.push(TextBundle {
            query_id: query_id(i),
            token_embeddings: embeddings,
            token_strings: strings,
            eot_attention: attention,
            eot_norms: norms,
            eot_joint: eot,
            text_projection: Array2::eye(dj),
            provenance: Some(format!("synthetic distractor scenario, seed {seed}")),
        });
        relevance.insert(query_id(i), [image_id(i)].into());
    }

    Ok(Scenario {
        config: *cfg,
        seed,
        visuals,
        texts,
        relevance,
        distractors,
    })
}

/// Writes `gallery/<image_id>/`, `queries/<query_id>/`, `relevance.json` and
/// `scenario.json` under `out`.
pub fn write_scenario(scenario: &Scenario, out: &Path) -> Result<()> {
    let gallery = out.join("gallery");
    let queries = out.join("queries");
    for v in &scenario.visuals {
        write_bundle(&Bundle::Visual(v.clone()), gallery.join(&v.image_id))?;
    }
    for t in &scenario.texts {
        write_bundle(&Bundle::Text(t.clone()), queries.join(&t.query_id))?;
    }
    let rel = out.join("relevance.json");
    let json =
        serde_json::to_string_pretty(&scenario.relevance).map_err(|e| Error::json(&rel, e))?;
    fs::write(&rel, json + "\n").map_err(|e| Error::io(&rel, e))?;

    #[derive(Serialize)]
    struct Meta<'a> {
        seed: u64,
        config: &'a ScenarioConfig,
        distractors: &'a [Distractor],
    }
    let meta = out.join("scenario.json");
    let json = serde_json::to_string_pretty(&Meta {
        seed: scenario.seed,
        config: &scenario.config,
        distractors: &scenario.distractors,
    })
    .map_err(|e| Error::json(&meta, e))?;
    fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_bundles_validate() {
        let s = distractor_scenario(7, &ScenarioConfig::default()).unwrap();
        assert_eq!(s.visuals.len(), 50);
        assert_eq!(s.distractors.len(), 10);
        for v in &s.visuals {
            v.validate().unwrap();
        }
        for t in &s.texts {
            t.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_fixture() {
        let a = distractor_scenario(3, &ScenarioConfig::default()).unwrap();
        let b = distractor_scenario(3, &ScenarioConfig::default()).unwrap();
        assert_eq!(a.visuals, b.visuals);
        assert_eq!(a.texts, b.texts);
    }

    #[test]
    fn random_bundles_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        random_visual(&mut rng, "v", Grid::new(5, 4), 8, 6)
            .validate()
            .unwrap();
        random_text(&mut rng, "t", 5, 3, 8, 6).validate().unwrap();
    }

    #[test]
    fn too_many_distractors_rejected() {
        let cfg = ScenarioConfig {
            items: 10,
            distractors: 6,
            ..Default::default()
        };
        assert!(distractor_scenario(0, &cfg).is_err());
    }
}
