use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use domcal::{GalleryVectors, TextThreshold, ThresholdStrategy};
use domcal_cli::{
    cmd_eval, cmd_gen_fixtures, cmd_index, cmd_inspect, cmd_retrieve, metrics_map, metrics_table,
    print_json, CliError, FixtureSpec, Overrides, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "domcal",
    version,
    about = "Calibrated text-to-image retrieval over exported features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a gallery of visual bundles and write an index.
    Index {
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rank the indexed gallery for every query bundle.
    Retrieve {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a results file against relevance judgements.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        relevance: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump heatmaps or the subword split for a single bundle.
    Inspect {
        #[arg(long)]
        bundle: PathBuf,
        /// Text bundle to anchor the region split of a visual bundle.
        #[arg(long)]
        query: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic gallery with distractor images.
    GenFixtures {
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        distractors: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file with defaults for any of these options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gate applied to dominant background tokens, in [0, 1].
    #[arg(long)]
    eta: Option<f64>,
    /// Weight of the global similarity in the fused score, in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Size of the re-ranked candidate pool.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_parser = ["mean", "mean_plus_std", "median"])]
    vis_threshold: Option<String>,
    #[arg(long, value_parser = ["mean", "median"])]
    text_threshold: Option<String>,
    #[arg(long, value_parser = ["calibrated", "recomputed", "exported"])]
    gallery_vectors: Option<String>,
    #[arg(long)]
    disable_cve: bool,
    #[arg(long)]
    disable_dcc: bool,
    /// Report and skip malformed bundles instead of aborting.
    #[arg(long)]
    skip_bad: bool,
    /// Worker threads; 0 picks the default.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse<T: std::str::FromStr>(value: Option<String>) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| CliError::validation(anyhow::anyhow!("{e}")))
        })
        .transpose()
}

impl Common {
    fn resolve(self, paths: Overrides) -> Result<RunConfig, CliError> {
        let flags = Overrides {
            out: self.out,
            eta: self.eta,
            lambda: self.lambda,
            topk: self.topk,
            epsilon: self.epsilon,
            vis_threshold: parse::<ThresholdStrategy>(self.vis_threshold)?,
            text_threshold: parse::<TextThreshold>(self.text_threshold)?,
            gallery_vectors: parse::<GalleryVectors>(self.gallery_vectors)?,
            disable_cve: self.disable_cve,
            disable_dcc: self.disable_dcc,
            skip_bad: self.skip_bad,
            threads: self.threads,
            seed: self.seed,
            ..paths
        };
        RunConfig::resolve(self.config.as_deref(), flags)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Index { gallery, common } => {
            let cfg = common.resolve(Overrides {
                gallery,
                ..Default::default()
            })?;
            let summary = cmd_index(&cfg)?;
            print_json(&summary)
        }
        Command::Retrieve {
            queries,
            index,
            common,
        } => {
            let cfg = common.resolve(Overrides {
                queries,
                index,
                ..Default::default()
            })?;
            let path = cmd_retrieve(&cfg)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Eval {
            results,
            relevance,
            common,
        } => {
            let cfg = common.resolve(Overrides {
                relevance,
                ..Default::default()
            })?;
            let metrics = cmd_eval(&results, &cfg)?;
            print!("{}", metrics_table(&metrics));
            print_json(&metrics_map(&metrics))
        }
        Command::Inspect {
            bundle,
            query,
            common,
        } => {
            let cfg = common.resolve(Overrides::default())?;
            for path in cmd_inspect(&bundle, query.as_deref(), &cfg)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::GenFixtures {
            items,
            distractors,
            common,
        } => {
            let cfg = common.resolve(Overrides::default())?;
            let defaults = FixtureSpec::default();
            let spec = FixtureSpec {
                items: items.unwrap_or(defaults.items),
                distractors: distractors.unwrap_or(defaults.distractors),
            };
            let out = cmd_gen_fixtures(spec, &cfg)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
