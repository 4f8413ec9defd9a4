//! Batch commands behind the `domcal` binary. Each `cmd_*` function is the
//! whole command minus argument parsing, so tests can drive them directly.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use domcal::bundle::audit_bundle;
use domcal::container::bundle_dirs;
use domcal::cve::{self, Anchor};
use domcal::dcc::{self, SubspaceDump};
use domcal::exec::{with_threads, Execution};
use domcal::heatmap::write_heatmap;
use domcal::index::IndexSummary;
use domcal::synth::{self, ScenarioConfig};
use domcal::{
    evaluate, load_bundle, load_text, load_visual, Bundle, GalleryIndex, Metrics, RankingResult,
    Relevance, TextBundle, VisualBundle,
};
use serde::Serialize;

pub use config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const INDEX_FILE: &str = "index.json";
pub const RESULTS_FILE: &str = "results.jsonl";

/// An error carrying the process exit code: 1 for invalid data or
/// configuration, 2 for filesystem failures.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn validation(source: anyhow::Error) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            source,
        }
    }

    pub fn io(source: anyhow::Error) -> Self {
        CliError {
            code: EXIT_IO,
            source,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl From<domcal::Error> for CliError {
    fn from(e: domcal::Error) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        CliError {
            code,
            source: e.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::io)
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::validation(e.into()))
}

fn execution() -> Execution {
    Execution::default()
}

/// Loads every bundle directory under `root`. A bad bundle aborts the run
/// unless `skip_bad` is set, in which case it is reported and left out.
fn load_all<T: Send>(
    root: &Path,
    skip_bad: bool,
    load: impl Fn(&Path) -> domcal::Result<T> + Sync + Send,
) -> CliResult<(Vec<T>, Vec<String>)> {
    let dirs = bundle_dirs(root)?;
    let loaded = execution().map(&dirs, |d| load(d).map_err(|e| (d.clone(), e)));
    let mut ok = Vec::with_capacity(loaded.len());
    let mut skipped = Vec::new();
    for item in loaded {
        match item {
            Ok(b) => ok.push(b),
            Err((dir, e)) if skip_bad => {
                let line = format!("{}: {:#}", dir.display(), anyhow::Error::new(e));
                eprintln!("skipping {line}");
                skipped.push(line);
            }
            Err((dir, e)) => {
                let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
                return Err(CliError {
                    code,
                    source: anyhow::Error::new(e).context(format!("loading {}", dir.display())),
                });
            }
        }
    }
    Ok((ok, skipped))
}

/// Builds and persists the gallery index; returns its summary.
pub fn cmd_index(cfg: &RunConfig) -> CliResult<IndexSummary> {
    let gallery = cfg.require(&cfg.gallery, "gallery")?;
    let out = cfg.require(&cfg.out, "out")?;
    config::writable_dir(out)?;
    with_threads(cfg.threads, || {
        let (visuals, skipped) = load_all(gallery, cfg.skip_bad, |d| load_visual(d))?;
        let index = GalleryIndex::build(&visuals, &cfg.index_config(), execution())?;
        index.save(out.join(INDEX_FILE))?;
        let mut summary = index.summary();
        summary.skipped = skipped;
        write_file(&out.join("index_summary.json"), to_json(&summary)? + "\n")?;
        cfg.echo(out)?;
        Ok(summary)
    })
}

pub fn results_to_jsonl(results: &[RankingResult]) -> CliResult<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::validation(e.into()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Ranks the gallery for every query and writes `results.jsonl`.
pub fn cmd_retrieve(cfg: &RunConfig) -> CliResult<PathBuf> {
    let queries = cfg.require(&cfg.queries, "queries")?;
    let index_path = cfg.require(&cfg.index, "index")?;
    let out = cfg.require(&cfg.out, "out")?;
    config::writable_dir(out)?;
    with_threads(cfg.threads, || {
        let index = GalleryIndex::load(index_path)?;
        let (texts, _) = load_all(queries, cfg.skip_bad, |d| load_text(d))?;
        let results = domcal::retrieve(&texts, &index, &cfg.retrieval_config(), execution())?;
        let path = out.join(RESULTS_FILE);
        write_file(&path, results_to_jsonl(&results)?)?;
        cfg.echo(out)?;
        Ok(path)
    })
}

pub fn read_results(path: &Path) -> CliResult<Vec<RankingResult>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::io)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
                .map_err(CliError::validation)
        })
        .collect()
}

pub fn read_relevance(path: &Path) -> CliResult<Relevance> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::io)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(CliError::validation)
}

pub fn metrics_table(m: &Metrics) -> String {
    format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8}  queries\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {}\n",
        "R@1",
        "R@5",
        "R@10",
        "R@50",
        "mAP",
        m.recall_at_1,
        m.recall_at_5,
        m.recall_at_10,
        m.recall_at_50,
        m.map,
        m.num_queries
    )
}

/// Scores a results file against relevance judgements. Writes
/// `metrics.json` when an output directory is configured.
pub fn cmd_eval(results: &Path, cfg: &RunConfig) -> CliResult<Metrics> {
    let relevance = cfg.require(&cfg.relevance, "relevance")?;
    let results = read_results(results)?;
    let relevance = read_relevance(relevance)?;
    let metrics = evaluate(&results, &relevance)?;
    if let Some(out) = &cfg.out {
        config::writable_dir(out)?;
        write_file(&out.join("metrics.json"), to_json(&metrics)? + "\n")?;
    }
    Ok(metrics)
}

#[derive(Debug, Serialize)]
struct VisualReport<'a> {
    image_id: &'a str,
    grid: [usize; 2],
    anchor: &'static str,
    similarity_threshold: f64,
    target: Vec<usize>,
    dominant: Vec<usize>,
    eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    audit_residual: Option<f64>,
}

fn inspect_visual(
    v: &VisualBundle,
    query: Option<&TextBundle>,
    cfg: &RunConfig,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    let rect = cfg.rectifier();
    let anchor = match query {
        Some(q) => Anchor::Text(q.eot_joint.view()),
        None => Anchor::PatchCentroid,
    };
    let cal = cve::calibrate_image(v, anchor, &rect)?;
    let attention = v.cls_attention.to_vec();
    let mask: Vec<f64> = cal
        .mask
        .mask
        .iter()
        .map(|&t| if t { 1.0 } else { 0.0 })
        .collect();
    let mut written = Vec::new();
    for (stem, values) in [
        ("attention", &attention),
        ("lc", &cal.report.lc),
        ("gate", &cal.rectified.gates),
        ("mask", &mask),
    ] {
        write_heatmap(out, stem, values, v.grid)?;
        written.push(out.join(format!("{stem}.csv")));
        written.push(out.join(format!("{stem}.pgm")));
    }
    let report = VisualReport {
        image_id: &v.image_id,
        grid: [v.grid.rows, v.grid.cols],
        anchor: if query.is_some() {
            "query"
        } else {
            "patch_centroid"
        },
        similarity_threshold: cal.mask.similarity_threshold,
        target: cal.mask.target(),
        dominant: cal.report.dominant.clone(),
        eta: rect.eta,
        audit_residual: audit_bundle(v).ok(),
    };
    let path = out.join("visual_report.json");
    write_file(&path, to_json(&report)? + "\n")?;
    written.push(path);
    Ok(written)
}

fn inspect_text(t: &TextBundle, cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let alpha = dcc::aggregate_attention(t);
    let split = dcc::split_subspaces(&alpha, cfg.text_threshold);
    let dump = SubspaceDump::new(t, &split, cfg.text_threshold);
    let path = out.join("text_subspaces.json");
    write_file(&path, to_json(&dump)? + "\n")?;
    Ok(vec![path])
}

/// Writes heatmaps for a visual bundle, or the subspace split for a text
/// bundle. A visual bundle is split against `query`'s global embedding when
/// given, and against its own patch centroid otherwise.
pub fn cmd_inspect(
    bundle: &Path,
    query: Option<&Path>,
    cfg: &RunConfig,
) -> CliResult<Vec<PathBuf>> {
    let out = cfg.require(&cfg.out, "out")?;
    config::writable_dir(out)?;
    let written = match load_bundle(bundle)? {
        Bundle::Visual(v) => {
            let q = query.map(load_text).transpose()?;
            inspect_visual(&v, q.as_ref(), cfg, out)?
        }
        Bundle::Text(t) => inspect_text(&t, cfg, out)?,
    };
    Ok(written)
}

#[derive(Debug, Clone, Copy)]
pub struct FixtureSpec {
    pub items: usize,
    pub distractors: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        FixtureSpec {
            items: d.items,
            distractors: d.distractors,
        }
    }
}

/// Writes the seeded distractor scenario (gallery, queries, relevance).
pub fn cmd_gen_fixtures(spec: FixtureSpec, cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.require(&cfg.out, "out")?;
    config::writable_dir(out)?;
    let scenario = synth::distractor_scenario(
        cfg.seed,
        &ScenarioConfig {
            items: spec.items,
            distractors: spec.distractors,
            ..Default::default()
        },
    )?;
    synth::write_scenario(&scenario, out)?;
    Ok(out.to_path_buf())
}

/// Prints a JSON value followed by a newline.
pub fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", to_json(value)?)
        .context("writing to stdout")
        .map_err(CliError::io)
}

/// Metrics keyed the way the table prints them, for machine consumption.
pub fn metrics_map(m: &Metrics) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("recall@1", m.recall_at_1),
        ("recall@5", m.recall_at_5),
        ("recall@10", m.recall_at_10),
        ("recall@50", m.recall_at_50),
        ("mAP", m.map),
    ])
}
