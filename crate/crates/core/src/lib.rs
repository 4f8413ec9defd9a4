//! Training-free calibration of dominant tokens in exported vision-language
//! features, with two-stage fused re-ranking for text-to-image retrieval.
//!
//! The pipeline has two halves:
//!
//! - [`cve`] damps background image patches whose `[CLS]` attention spikes
//!   above their neighbourhood, then re-aggregates the global embedding.
//!   [`index::GalleryIndex`] stores the result per image.
//! - [`dcc`] splits a caption's subwords by layer-aggregated `[EOT]`
//!   attention, attenuates the general ones and pools a discriminative token
//!   that [`rerank`] blends with the global similarity over the top-k pool.
//!
//! Feature bundles are read and written by [`container`]. Independent items
//! are processed through [`exec::Execution`], which uses rayon when the
//! `parallel` feature is enabled.

pub mod bundle;
pub mod container;
pub mod cve;
pub mod dcc;
pub mod error;
pub mod exec;
pub mod heatmap;
pub mod index;
pub mod linalg;
pub mod pipeline;
pub mod rerank;
pub mod synth;

pub use bundle::{validate_cls_aggregation, Bundle, Grid, TextBundle, VisualBundle};
pub use container::{load_bundle, load_text, load_visual, write_bundle};
pub use cve::{Anchor, RectifierConfig, ThresholdStrategy};
pub use dcc::{CalibratedQuery, TextThreshold};
pub use error::{Error, Result};
pub use exec::Execution;
pub use index::{GalleryIndex, GalleryVectors, IndexConfig};
pub use pipeline::{retrieve, RetrievalConfig};
pub use rerank::{evaluate, FusionConfig, Metrics, RankingResult, Relevance};
