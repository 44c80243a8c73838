//! `herbrec`: synthesise corpora, train, evaluate, recommend, run ablations
//! and render reports.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid input.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use herbrec::corpus::{CorpusFormat, Gender};
use herbrec::dmsh::DiffusionParam;
use herbrec::error::Error;
use herbrec::recommender::Variant;
use serde_json::{json, Map, Value};

use commands::{OutputFormat, ProfileArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "herbrec", version, about = "Herb prescription recommender")]
struct Cli {
    /// Minimum level of the JSON-lines log written to stderr.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Each overrides the same key of `--config`.
#[derive(Args, Clone, Default)]
struct Common {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus file layout.
    #[arg(long, value_parser = parse_format)]
    format: Option<CorpusFormat>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_diffusion)]
    diffusion_param: Option<DiffusionParam>,
    #[arg(long)]
    kmeans_max_iter: Option<usize>,
    #[arg(long)]
    kmeans_tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, knowledge graph, labels and planted-rule manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: Option<usize>,
    },
    /// Fit a model and write the artifact directory with its JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Training log path (default: <artifact>/train_log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compute Precision/Recall/NDCG@K on the held-out split or `--dataset`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, visible_alias = "k", value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Rank herbs for one patient.
    Recommend {
        #[command(flatten)]
        common: Common,
        /// Symptom names, comma separated or repeated.
        #[arg(long, value_delimiter = ',', required = true)]
        symptoms: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_gender)]
        gender: Option<Gender>,
        #[arg(long)]
        age: Option<f64>,
        #[arg(long)]
        height: Option<f64>,
        #[arg(long)]
        weight: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        history: Vec<String>,
        #[arg(long, value_enum, default_value = "text")]
        output: OutputFormat,
    },
    /// Fit and evaluate the full model and its ablations on one split.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "variant", value_delimiter = ',', num_args = 1.., value_parser = parse_variant)]
        variants: Vec<Variant>,
        #[arg(long, visible_alias = "k", value_delimiter = ',')]
        ks: Vec<usize>,
        /// Fit variants concurrently.
        #[arg(long)]
        concurrent: bool,
    },
    /// Render frequency histograms, loss curves and per-group metrics as SVG + CSV.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_format(s: &str) -> Result<CorpusFormat, String> {
    s.parse()
}

fn parse_diffusion(s: &str) -> Result<DiffusionParam, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_gender(s: &str) -> Result<Gender, String> {
    Gender::parse(s).ok_or_else(|| format!("unknown gender `{s}`"))
}

fn put<T: serde::Serialize>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

impl Common {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        put(&mut m, "seed", self.seed);
        put(&mut m, "dataset", self.dataset.clone());
        put(&mut m, "kg", self.kg.clone());
        put(&mut m, "labels", self.labels.clone());
        put(&mut m, "artifact", self.artifact.clone());
        put(&mut m, "out", self.out.clone());
        put(&mut m, "format", self.format);
        put(&mut m, "epochs", self.epochs);
        put(&mut m, "diffusion_param", self.diffusion_param);
        put(&mut m, "kmeans_max_iter", self.kmeans_max_iter);
        put(&mut m, "kmeans_tol", self.kmeans_tol);
        m
    }

    fn resolve(&self, extra: Map<String, Value>) -> herbrec::error::Result<RunConfig> {
        let mut m = self.overrides();
        m.extend(extra);
        RunConfig::resolve(self.config.as_deref(), m)
    }
}

struct JsonLogger {
    level: log::LevelFilter,
}

impl log::Log for JsonLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            let line = json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            eprintln!("{line}");
        }
    }

    fn flush(&self) {}
}

fn run(cli: Cli) -> herbrec::error::Result<()> {
    match cli.command {
        Command::Synth { common, records } => {
            let mut m = Map::new();
            put(&mut m, "n_records", records);
            commands::synth(&common.resolve(m)?)
        }
        Command::Train { common, variant, log } => {
            let mut m = Map::new();
            put(&mut m, "variant", variant);
            put(&mut m, "log", log);
            commands::train(&common.resolve(m)?)
        }
        Command::Eval { common, ks } => {
            let mut m = Map::new();
            put(&mut m, "ks", (!ks.is_empty()).then_some(ks));
            commands::eval(&common.resolve(m)?)
        }
        Command::Recommend { common, symptoms, k, gender, age, height, weight, history, output } => {
            let mut m = Map::new();
            put(&mut m, "k", k);
            let profile = ProfileArgs { gender, age, height, weight, history };
            commands::recommend(&common.resolve(m)?, &symptoms, &profile, output)
        }
        Command::Ablate { common, variants, ks, concurrent } => {
            let mut m = Map::new();
            put(&mut m, "variants", (!variants.is_empty()).then_some(variants));
            put(&mut m, "ks", (!ks.is_empty()).then_some(ks));
            put(&mut m, "concurrent_variants", concurrent.then_some(true));
            commands::ablate(&common.resolve(m)?)
        }
        Command::Report { common } => commands::report(&common.resolve(Map::new())?),
        Command::Config { common } => commands::show_config(&common.resolve(Map::new())?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = cli.log_level;
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
