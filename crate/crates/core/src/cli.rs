//! `amrlab` command line: generate, train, matrix, attribution.
//!
//! Exit codes: 0 ok, 2 config error, 3 data/IO error, 4 numeric failure (or
//! any failed run in a matrix).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::attribution::{attribute, AttributionReport};
use crate::config::{ExperimentConfig, MatrixSection, StrategyName};
use crate::data::load_feature_file;
use crate::error::{Error, Result};
use crate::harness::{self, evaluate, MetricsReport, RunSpec};
use crate::model::MultimodalModel;

#[derive(Debug, Parser)]
#[command(name = "amrlab", version, about = "Multimodal attribution regularization lab")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (or output file for `attribution`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel runs for `matrix`; capped by AMRLAB_THREADS.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Validate the config and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val AMRDATA files plus a manifest.
    Generate,
    /// Train one model; writes checkpoint and metrics.
    Train,
    /// Run the method × regularizer matrix; writes results.csv.
    Matrix {
        /// Runs per cell with consecutive seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Dump per-sample attributions of a checkpoint on an AMRDATA file.
    Attribution {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("amrlab: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Generate => cmd_generate(cli).map(|_| 0),
        Command::Train => cmd_train(cli).map(|_| 0),
        Command::Matrix { seeds } => cmd_matrix(cli, *seeds),
        Command::Attribution { checkpoint, data } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::Config("attribution needs --out <csv>".into()))?;
            let summary = cmd_attribution(checkpoint, data, &out)?;
            println!("dominance {}", summary.dominance());
            Ok(0)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json(value: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    train_file: String,
    val_file: String,
    train_samples: usize,
    val_samples: usize,
    modality_dims: Vec<usize>,
    num_classes: usize,
}

pub fn cmd_generate(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let synth = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("generate needs a [data.synthetic] section".into()))?;
    if cli.dry_run {
        println!("config ok");
        return Ok(());
    }
    let (train, val) = crate::data::generate_synthetic(synth)?;
    let dir = out_dir(cli, &cfg)?;
    train.write_feature_file(&dir.join("train.amrdata"))?;
    val.write_feature_file(&dir.join("val.amrdata"))?;
    let json = serde_json::to_vec(synth).map_err(|e| Error::Internal(e.to_string()))?;
    let manifest = Manifest {
        config_hash: hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&json)),
        train_file: "train.amrdata".into(),
        val_file: "val.amrdata".into(),
        train_samples: train.len(),
        val_samples: val.len(),
        modality_dims: train.modality_dims(),
        num_classes: train.num_classes(),
    };
    write(&dir.join("manifest.json"), to_json(&manifest)?)?;
    println!(
        "wrote {} train / {} val samples to {}",
        train.len(),
        val.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainArtifact<'a> {
    method: String,
    amr_enabled: bool,
    config_hash: String,
    /// Split the reported metrics and dominance were measured on.
    attribution_split: &'a str,
    final_report: &'a MetricsReport,
    history: &'a [MetricsReport],
}

pub fn cmd_train(cli: &Cli) -> Result<Option<MetricsReport>> {
    let cfg = load_config(cli)?;
    if cli.dry_run {
        println!("config ok");
        return Ok(None);
    }
    let data = Arc::new(cfg.load_data()?);
    let (m, c) = (data.0.modality_dims(), data.0.num_classes());
    let spec = RunSpec {
        method: cfg.strategy(&cfg.train.strategy).label(),
        model: cfg.model_config(m, c),
        train: cfg.train_config(&cfg.train.strategy, cfg.amr.enabled)?,
        data: data.clone(),
    };
    let outcome = harness::run_experiment(&spec)?;
    let dir = out_dir(cli, &cfg)?;
    outcome.model.save(&dir.join("model.ckpt"))?;
    let report = outcome.final_report().clone();
    let artifact = TrainArtifact {
        method: spec.method.clone(),
        amr_enabled: spec.amr_enabled(),
        config_hash: cfg.hash(),
        attribution_split: "val",
        final_report: &report,
        history: &outcome.history,
    };
    write(&dir.join("metrics.json"), to_json(&artifact)?)?;
    write(&dir.join("metrics.csv"), history_csv(&outcome.history)?)?;
    if cfg.output.attribution_dump {
        let val = &data.1;
        let inputs = if outcome.model.num_modalities() == val.num_modalities() {
            val.features().to_vec()
        } else {
            vec![val.features()[cfg.train.unimodal.modality].clone()]
        };
        let rep = attribute(&outcome.model, &inputs, cfg.amr.logit, Some(val.labels()))?;
        write(&dir.join("attribution.csv"), attribution_csv(&rep)?)?;
    }
    println!(
        "{} amr={} step={} accuracy={:.4} mAP={:.4} dominance={} task_loss={:.4}",
        spec.method,
        spec.amr_enabled(),
        report.step,
        report.accuracy,
        report.map,
        report.dominance,
        report.task_loss
    );
    Ok(Some(report))
}

fn history_csv(history: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Internal(e.to_string());
    w.write_record(["step", "accuracy", "mAP", "dominance", "task_loss", "amr_loss"])
        .map_err(err)?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.map),
            r.dominance.clone(),
            format!("{:.6}", r.task_loss),
            r.amr_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?)
        .map_err(|e| Error::Internal(e.to_string()))
}

/// `sample_index,modality_index,pooled,normalized`, one row per sample and
/// modality.
pub fn attribution_csv(report: &AttributionReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Internal(e.to_string());
    w.write_record(["sample_index", "modality_index", "pooled", "normalized"])
        .map_err(err)?;
    let m = report.per_sample.cols();
    for i in 0..report.per_sample.rows() {
        for k in 0..m {
            w.write_record([
                i.to_string(),
                k.to_string(),
                format!("{:e}", report.raw_pooled.at(i, k)),
                format!("{:e}", report.per_sample.at(i, k)),
            ])
            .map_err(err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?)
        .map_err(|e| Error::Internal(e.to_string()))
}

pub fn cmd_matrix(cli: &Cli, seeds: Option<usize>) -> Result<i32> {
    let cfg = load_config(cli)?;
    let matrix = cfg
        .matrix
        .clone()
        .ok_or_else(|| Error::Config("matrix needs a [matrix] section".into()))?;
    if matrix.strategies.is_empty() || matrix.amr.is_empty() {
        return Err(Error::Config("matrix.strategies and matrix.amr must be non-empty".into()));
    }
    let seeds = seeds.unwrap_or(matrix.seeds).max(1);
    let specs = matrix_specs(&cfg, &matrix, seeds)?;
    // Config errors surface before any run starts.
    for s in &specs {
        s.train.validate(s.model.modality_dims.len())?;
    }
    if cli.dry_run {
        println!("config ok: {} runs", specs.len());
        return Ok(0);
    }
    let results = harness::run_matrix(&specs, job_count(cli.jobs));
    let dir = out_dir(cli, &cfg)?;
    write(&dir.join("results.csv"), harness::results_csv(&results)?)?;
    for r in &results {
        if let Ok(report) = &r.outcome {
            let name = format!(
                "run_{}_{}_{}.json",
                r.method.replace([' ', '(', ')'], ""),
                if r.amr_enabled { "amr" } else { "plain" },
                r.seed
            );
            write(&dir.join(name), to_json(report)?)?;
        }
    }
    let mut failed = 0;
    for r in &results {
        match &r.outcome {
            Ok(m) => println!(
                "{:<18} amr={:<5} seed={:<4} mAP={:.4} acc={:.4} dominance={}",
                r.method, r.amr_enabled, r.seed, m.map, m.accuracy, m.dominance
            ),
            Err(e) => {
                failed += 1;
                println!("{:<18} amr={:<5} seed={:<4} FAILED: {e}", r.method, r.amr_enabled, r.seed)
            }
        }
    }
    Ok(if failed > 0 { 4 } else { 0 })
}

/// Expands the matrix section into run specs, `seeds` consecutive seeds per
/// cell. Unimodal becomes one run per modality and has no regularized variant.
pub fn matrix_specs(cfg: &ExperimentConfig, matrix: &MatrixSection, seeds: usize) -> Result<Vec<RunSpec>> {
    let mut specs = Vec::new();
    for k in 0..seeds {
        let c = cfg.with_seed_offset(k as u64);
        c.validate()?;
        let data = Arc::new(c.load_data()?);
        let (m, classes) = (data.0.modality_dims(), data.0.num_classes());
        for strategy in &matrix.strategies {
            for &amr in &matrix.amr {
                if *strategy == StrategyName::Unimodal {
                    if amr {
                        continue;
                    }
                    for modality in 0..m.len() {
                        let mut cm = c.clone();
                        cm.train.unimodal.modality = modality;
                        specs.push(RunSpec {
                            method: cm.strategy(strategy).label(),
                            model: cm.model_config(m.clone(), classes),
                            train: cm.train_config(strategy, false)?,
                            data: data.clone(),
                        });
                    }
                    continue;
                }
                specs.push(RunSpec {
                    method: c.strategy(strategy).label(),
                    model: c.model_config(m.clone(), classes),
                    train: c.train_config(strategy, amr)?,
                    data: data.clone(),
                });
            }
        }
    }
    Ok(specs)
}

fn job_count(requested: Option<usize>) -> usize {
    let cap = std::env::var("AMRLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0);
    let jobs = requested.unwrap_or(1).max(1);
    cap.map_or(jobs, |c| jobs.min(c))
}

/// Writes the attribution dump and returns the summary report. Shape
/// mismatches are reported before anything is written.
pub fn cmd_attribution(checkpoint: &Path, data: &Path, out: &Path) -> Result<AttributionReport> {
    let model = MultimodalModel::load(checkpoint)?;
    let dataset = load_feature_file(data)?;
    if dataset.modality_dims() != model.config().modality_dims {
        return Err(Error::Data(format!(
            "data modality widths {:?} do not match checkpoint {:?}",
            dataset.modality_dims(),
            model.config().modality_dims
        )));
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::Data("data class count does not match checkpoint".into()));
    }
    let report = attribute(
        &model,
        dataset.features(),
        crate::attribution::AttributedLogit::Predicted,
        Some(dataset.labels()),
    )?;
    write(out, attribution_csv(&report)?)?;
    Ok(report)
}

/// Dominance the harness reports for the same model and data.
pub fn evaluate_dominance(checkpoint: &Path, data: &Path) -> Result<String> {
    let model = MultimodalModel::load(checkpoint)?;
    let dataset = load_feature_file(data)?;
    Ok(evaluate(&model, &dataset, None)?.dominance)
}
