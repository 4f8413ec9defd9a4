//! Run configuration. Precedence is command-line flags, then the optional
//! TOML config file, then built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use domcal::{
    FusionConfig, GalleryVectors, IndexConfig, RectifierConfig, RetrievalConfig, TextThreshold,
    ThresholdStrategy,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gallery: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub relevance: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub eta: f64,
    pub lambda: f64,
    pub topk: usize,
    pub epsilon: f64,
    pub vis_threshold: ThresholdStrategy,
    pub text_threshold: TextThreshold,
    pub gallery_vectors: GalleryVectors,
    pub disable_cve: bool,
    pub disable_dcc: bool,
    pub skip_bad: bool,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rect = RectifierConfig::default();
        let fusion = FusionConfig::default();
        RunConfig {
            gallery: None,
            queries: None,
            index: None,
            relevance: None,
            out: None,
            eta: rect.eta,
            lambda: fusion.lambda,
            topk: fusion.k,
            epsilon: rect.epsilon,
            vis_threshold: rect.threshold_strategy,
            text_threshold: TextThreshold::default(),
            gallery_vectors: GalleryVectors::default(),
            disable_cve: false,
            disable_dcc: false,
            skip_bad: false,
            threads: 0,
            seed: 0,
        }
    }
}

/// Flag values that override the config file when given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub gallery: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub relevance: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub topk: Option<usize>,
    pub epsilon: Option<f64>,
    pub vis_threshold: Option<ThresholdStrategy>,
    pub text_threshold: Option<TextThreshold>,
    pub gallery_vectors: Option<GalleryVectors>,
    pub disable_cve: bool,
    pub disable_dcc: bool,
    pub skip_bad: bool,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(CliError::io)?;
        toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(CliError::validation)
    }

    pub fn resolve(file: Option<&Path>, flags: Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = flags.$field { cfg.$field = v.into(); })*
            };
        }
        take!(
            eta,
            lambda,
            topk,
            epsilon,
            vis_threshold,
            text_threshold,
            gallery_vectors,
            threads,
            seed
        );
        for (slot, value) in [
            (&mut cfg.gallery, flags.gallery),
            (&mut cfg.queries, flags.queries),
            (&mut cfg.index, flags.index),
            (&mut cfg.relevance, flags.relevance),
            (&mut cfg.out, flags.out),
        ] {
            if value.is_some() {
                *slot = value;
            }
        }
        cfg.disable_cve |= flags.disable_cve;
        cfg.disable_dcc |= flags.disable_dcc;
        cfg.skip_bad |= flags.skip_bad;
        cfg.validate().map_err(CliError::validation)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.rectifier().validate()?;
        FusionConfig {
            lambda: self.lambda,
            k: self.topk,
        }
        .validate()?;
        Ok(())
    }

    pub fn rectifier(&self) -> RectifierConfig {
        RectifierConfig {
            eta: self.eta,
            threshold_strategy: self.vis_threshold,
            epsilon: self.epsilon,
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            rectifier: self.rectifier(),
            disable_cve: self.disable_cve,
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        // With the visual stage off, rank against the uncalibrated re-aggregation.
        let gallery_vectors = match (self.disable_cve, self.gallery_vectors) {
            (true, GalleryVectors::Calibrated) => GalleryVectors::Recomputed,
            (_, v) => v,
        };
        RetrievalConfig {
            fusion: FusionConfig {
                lambda: self.lambda,
                k: self.topk,
            },
            text_threshold: self.text_threshold,
            disable_dcc: self.disable_dcc,
            gallery_vectors,
        }
    }

    pub fn require<'a>(
        &self,
        field: &'a Option<PathBuf>,
        name: &str,
    ) -> Result<&'a Path, CliError> {
        match field {
            Some(p) => Ok(p.as_path()),
            None => Err(CliError::validation(anyhow::anyhow!(
                "--{name} is required"
            ))),
        }
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, out_dir: &Path) -> Result<(), CliError> {
        let path = out_dir.join("run_config.json");
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CliError::validation(e.into()))?;
        fs::write(&path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::io)
    }
}

/// Creates `dir` if needed and checks that it accepts writes.
pub fn writable_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(CliError::io)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .with_context(|| format!("output directory {} is not writable", dir.display()))
        .map_err(CliError::io)
}
