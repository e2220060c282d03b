//! Subcommands of the `vitgat` binary. Each `cmd_*` function is usable
//! without the argument parser.

use std::path::{Path, PathBuf};
use std::collections::BTreeMap;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vitgat::config::{RunConfig, SCHEMA_VERSION};
use vitgat::eval::{compare_reports, format_summary, Metric, MetricComparison};
use vitgat::explain::Explanation;
use vitgat::extract::Strategy;
use vitgat::pipeline::{explain_run_fold, load_metrics, prepare, run_cross_validation, write_run, RunOutcome};
use vitgat::volume::{generate_synthetic_dataset, ManifestSource};
use vitgat::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Json(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) | Error::Format { .. } => EXIT_MISSING,
        Error::NumericDivergence { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "vitgat", version = SCHEMA_VERSION, about = "3D ViT + GAT classification of brain volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (manifest, atlas, volumes).
    Generate(GenerateArgs),
    /// Cross-validated training and evaluation.
    Run(RunArgs),
    /// Welch t-tests between the fold metrics of two runs.
    Compare(CompareArgs),
    /// Node importance for one fold of a finished run.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub effect_size: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    #[arg(long, default_value = "ttest.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the explain section stored with the run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub sparsity_weight: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

pub fn load_config(path: Option<&Path>) -> vitgat::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

/// Writes the dataset and returns the manifest path.
pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> vitgat::Result<PathBuf> {
    cfg.dataset
        .validate()
        .map_err(|e| Error::Config(format!("dataset: {e}")))?;
    generate_synthetic_dataset(&cfg.dataset)?.write(out_dir)
}

pub fn cmd_run(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    jobs: usize,
    progress: Option<&(dyn Fn(&str) + Sync)>,
) -> vitgat::Result<RunOutcome> {
    cfg.validate()?;
    let source = ManifestSource::open(&data_dir.join("manifest.json"))?;
    let data = prepare(&source, cfg)?;
    let run = run_cross_validation(&data, cfg, jobs, progress)?;
    write_run(out_dir, cfg, &data, &run)?;
    Ok(run)
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    pub metrics: BTreeMap<Metric, MetricComparison>,
}

pub fn cmd_compare(run_a: &Path, run_b: &Path, out: &Path) -> vitgat::Result<Comparison> {
    let a = load_metrics(run_a)?;
    let b = load_metrics(run_b)?;
    let c = Comparison {
        run_a: run_a.to_path_buf(),
        run_b: run_b.to_path_buf(),
        metrics: compare_reports(&a, &b)?,
    };
    let text = serde_json::to_string_pretty(&c)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(out, text).map_err(|e| io_error(out, e))?;
    Ok(c)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn cmd_explain(run_dir: &Path, fold: usize, out_dir: &Path, cfg: &RunConfig) -> vitgat::Result<Explanation> {
    cfg.explain.validate()?;
    let explanation = explain_run_fold(run_dir, fold, &cfg.explain)?;
    explanation.write(out_dir)?;
    Ok(explanation)
}

fn format_comparison(c: &Comparison) -> String {
    let mut out = String::new();
    for (m, r) in &c.metrics {
        let line = match r.p {
            Some(p) => format!(
                "{:<12} t = {:>8.3}  p = {:.4}{}\n",
                m.name(),
                r.t.unwrap_or(f64::NAN),
                p,
                if r.significant { "  *" } else { "" }
            ),
            None => format!("{:<12} n/a ({})\n", m.name(), r.note.as_deref().unwrap_or("undefined")),
        };
        out.push_str(&line);
    }
    out
}

pub fn execute(cli: Cli) -> vitgat::Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.dataset.seed = s;
            }
            if let Some(n) = a.subjects {
                cfg.dataset.n_subjects = n;
            }
            if let Some(e) = a.effect_size {
                cfg.dataset.effect_size = e;
            }
            let manifest = cmd_generate(&cfg, &a.out)?;
            println!("{}", manifest.display());
        }
        Command::Run(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(s) = a.strategy {
                cfg.extraction.strategy = s;
            }
            if let Some(k) = a.folds {
                cfg.eval.folds = k;
            }
            if let Some(s) = a.seed {
                cfg.eval.seed = s;
            }
            let log = |m: &str| eprintln!("{m}");
            let progress: Option<&(dyn Fn(&str) + Sync)> = if a.quiet { None } else { Some(&log) };
            let run = cmd_run(&cfg, &a.data, &a.out, a.jobs, progress)?;
            print!("{}", format_summary(&run.report));
        }
        Command::Compare(a) => {
            let c = cmd_compare(&a.run_a, &a.run_b, &a.out)?;
            print!("{}", format_comparison(&c));
        }
        Command::Explain(a) => {
            let mut cfg = match a.config.as_deref() {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::load(&a.run.join("config.json"))?,
            };
            if let Some(s) = a.steps {
                cfg.explain.steps = s;
            }
            if let Some(w) = a.sparsity_weight {
                cfg.explain.sparsity_weight = w;
            }
            if let Some(k) = a.top_k {
                cfg.explain.top_k = k;
            }
            let e = cmd_explain(&a.run, a.fold, &a.out, &cfg)?;
            for (ctx, ranked) in &e.rankings {
                let ids: Vec<String> = ranked.iter().map(|(id, _)| id.to_string()).collect();
                println!("{ctx}: {}", ids.join(" "));
            }
        }
    }
    Ok(())
}
