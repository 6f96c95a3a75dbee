//! Command-line front door wiring preprocessing, training, evaluation, and
//! gradient checks into reproducible runs.
//!
//! Exit codes: 0 success, 1 computation failure, 2 configuration or I/O
//! failure. Every command honors `--seed`; identical invocations produce
//! byte-identical artifacts.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{model_config, resolve, ConfigError, EvalMode, Overrides, RunConfig, RunConfigFile};
use crate::dataset::{ingest, DatasetError, DiseaseClass, IngestSummary, LeadDataset};
use crate::eval::{
    cross_validate, holdout_evaluate, holdout_evaluate_checkpoint, per_report_confusion,
    CrossValReport, EvalError, HoldoutReport, MetricsReport,
};
use crate::models::{
    grad_check_model, load_checkpoint, randomize_params, save_checkpoint, standard_gradcheck_batch,
    AnyModel, ModelError,
};
use crate::tensor::{GradCheckOptions, GradCheckReport, TensorError};
use crate::train::{train, TrainError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_COMPUTATION: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    /// Configuration or I/O problems; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Numerical or training failures; exit code 1.
    #[error("{0}")]
    Computation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Computation(_) => EXIT_COMPUTATION,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::EmptyDataset => {
                CliError::Config(e.to_string())
            }
            other => CliError::Computation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => CliError::from(t),
            EvalError::Model(m) => CliError::from(m),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => CliError::Computation(t.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Computation(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("io error on {}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "ecgformer",
    about = "ECG report preprocessing, vision-transformer training, and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model variant: vit | swin | beit.
    #[arg(long)]
    pub model: Option<String>,
    /// Training profile: google-vit | swin | beit.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent folds/files.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory (default "out").
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Preprocess report scans into per-lead PNGs plus a manifest CSV.
    Preprocess {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset root containing MI/, AbnormalHB/, HistoryMI/, Normal/.
        #[arg(long)]
        dataset_root: Option<PathBuf>,
    },
    /// Train a variant on the preprocessed manifest.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run 5-fold cross-validation or the 80/0/20 holdout.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Evaluation mode: 5fold | holdout.
        #[arg(long)]
        mode: Option<String>,
        /// Evaluate this checkpoint on the holdout test split instead of
        /// training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also reduce per-lead predictions to per-report majority votes.
        #[arg(long)]
        per_report: bool,
    },
    /// Compare backward gradients against central finite differences on a
    /// small config.
    Gradcheck {
        /// Variant to check: vit | swin | beit.
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Negative control: corrupt the analytic gradients so the check
        /// must fail.
        #[arg(long)]
        corrupt_backward: bool,
    },
}

fn load_run_config(common: &CommonArgs, dataset_root: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let overrides = Overrides {
        dataset_root,
        out_dir: common.out.clone(),
        seed: common.seed,
        jobs: common.jobs,
        model: common.model.clone(),
        profile: common.profile.clone(),
        mode: None,
    };
    Ok(resolve(file, &overrides)?)
}

/// Dispatch a parsed command line, returning the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result: Result<u8, CliError> = match cli.command {
        Command::Preprocess { common, dataset_root } => {
            load_run_config(&common, dataset_root).and_then(|cfg| {
                let summary = cmd_preprocess(&cfg)?;
                print_ingest_summary(&summary);
                Ok(EXIT_OK)
            })
        }
        Command::Train { common } => load_run_config(&common, None).and_then(|cfg| {
            let artifacts = cmd_train(&cfg)?;
            println!(
                "trained {} for {} steps; final loss {}",
                cfg.variant, artifacts.steps, artifacts.final_loss
            );
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("loss curve: {}", artifacts.curve_csv.display());
            Ok(EXIT_OK)
        }),
        Command::Evaluate { common, mode, checkpoint, per_report } => {
            load_run_config(&common, None).and_then(|mut cfg| {
                if let Some(mode) = mode {
                    cfg.eval_mode = mode.parse().map_err(CliError::from)?;
                }
                if per_report {
                    cfg.per_report = true;
                }
                let json_path = cmd_evaluate(&cfg, checkpoint.as_deref())?;
                println!("metrics: {}", json_path.display());
                Ok(EXIT_OK)
            })
        }
        Command::Gradcheck { variant, seed, step, tol, corrupt_backward } => {
            cmd_gradcheck(&variant, seed, step, tol, corrupt_backward).map(|outcome| {
                println!(
                    "gradcheck {}: {} max_rel_err={:.3e} coords={} ({:.1}s)",
                    outcome.variant,
                    if outcome.report.passed { "PASS" } else { "FAIL" },
                    outcome.report.max_rel_err,
                    outcome.report.coords_checked,
                    outcome.elapsed.as_secs_f64()
                );
                if outcome.report.passed {
                    EXIT_OK
                } else {
                    EXIT_COMPUTATION
                }
            })
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_ingest_summary(summary: &IngestSummary) {
    for class in DiseaseClass::ALL {
        println!(
            "{}: {} reports, {} leads",
            class.dir_name(),
            summary.reports_per_class[class.label()],
            summary.leads_per_class[class.label()]
        );
    }
    println!(
        "total: {} reports, {} leads",
        summary.total_reports(),
        summary.total_leads()
    );
    for (path, message) in &summary.failures {
        eprintln!("skipped {}: {message}", path.display());
    }
}

/// Ingest the dataset root into `out/leads/*.png` and `out/manifest.csv`.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<IngestSummary, CliError> {
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| CliError::Config("dataset_root is required for preprocess".into()))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    Ok(ingest(root, &cfg.out_dir, &cfg.ingest, cfg.jobs)?)
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub curve_csv: PathBuf,
    pub final_loss: f64,
    pub steps: usize,
}

/// Train the configured variant on `out/manifest.csv`, writing
/// `checkpoint.bin` and `loss_curve.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts, CliError> {
    let dataset = load_dataset(cfg)?;
    let checkpoint = cfg.out_dir.join("checkpoint.bin");
    let curve_csv = cfg.out_dir.join("loss_curve.csv");
    match train(&dataset, &cfg.model, &cfg.train) {
        Ok(out) => {
            save_checkpoint(&out.model, &checkpoint)?;
            out.curve.write_csv(&curve_csv)?;
            Ok(TrainArtifacts {
                checkpoint,
                curve_csv,
                final_loss: out.curve.final_loss().unwrap_or(f64::NAN),
                steps: out.curve.points.len(),
            })
        }
        Err(TrainError::Diverged { step, last_good, curve }) => {
            // keep the last good parameters around for inspection
            let mut model = AnyModel::new(&cfg.model, cfg.train.seed)?;
            for ((_, dst), (_, src)) in model.params_mut().iter_mut().zip(last_good.iter()) {
                dst.values_mut().copy_from_slice(src.values());
            }
            save_checkpoint(&model, &checkpoint)?;
            curve.write_csv(&curve_csv)?;
            Err(CliError::Computation(format!(
                "non-finite loss at step {step}; last good checkpoint written to {}",
                checkpoint.display()
            )))
        }
        Err(other) => Err(other.into()),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<LeadDataset, CliError> {
    let manifest = cfg.out_dir.join("manifest.csv");
    if !manifest.is_file() {
        return Err(CliError::Config(format!(
            "manifest {} not found; run preprocess first",
            manifest.display()
        )));
    }
    let dataset = LeadDataset::load(&manifest)?;
    let side = cfg.model.image_side();
    if let Some(bad) = dataset.samples.iter().find(|s| s.side != side) {
        return Err(CliError::Config(format!(
            "lead images are {}x{} but the {} config expects {}x{}; re-run preprocess with resize = {}",
            bad.side, bad.side, cfg.variant, side, side, side
        )));
    }
    Ok(dataset)
}

/// Run the configured evaluation and write `metrics.json`,
/// `metrics_table.csv`, and per-split confusion CSVs.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf, CliError> {
    let dataset = load_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let class_names: Vec<String> = DiseaseClass::ALL.iter().map(|c| c.to_string()).collect();
    let json_path = cfg.out_dir.join("metrics.json");
    let table_path = cfg.out_dir.join("metrics_table.csv");

    let json = match cfg.eval_mode {
        EvalMode::FiveFold => {
            let report = cross_validate(
                &dataset,
                &cfg.model,
                &cfg.train,
                cfg.k,
                cfg.stratified,
                cfg.group_by_report,
                cfg.jobs,
            )?;
            for fold in &report.folds {
                let path = cfg.out_dir.join(format!("confusion_fold{}.csv", fold.fold));
                std::fs::write(&path, fold.confusion.to_csv(&class_names))
                    .map_err(|e| io_err(&path, e))?;
            }
            write_table(&table_path, &cfg.variant, &report.pooled)?;
            crossval_json(cfg, &report, &dataset)?
        }
        EvalMode::Holdout => {
            let report = match checkpoint {
                Some(path) => {
                    let model = load_checkpoint(path)?;
                    holdout_evaluate_checkpoint(
                        &dataset,
                        &model,
                        cfg.holdout_ratios,
                        cfg.stratified,
                        cfg.train.seed,
                    )?
                }
                None => holdout_evaluate(
                    &dataset,
                    &cfg.model,
                    &cfg.train,
                    cfg.holdout_ratios,
                    cfg.stratified,
                )?,
            };
            let path = cfg.out_dir.join("confusion_holdout.csv");
            std::fs::write(&path, report.confusion.to_csv(&class_names))
                .map_err(|e| io_err(&path, e))?;
            write_table(&table_path, &cfg.variant, &report.metrics)?;
            holdout_json(cfg, &report, &dataset)?
        }
    };
    let text = serde_json::to_string_pretty(&json)
        .map_err(|e| CliError::Computation(format!("metrics serialization: {e}")))?;
    std::fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
    Ok(json_path)
}

/// One Table-II-shaped row: model, precision, recall, F1, accuracy.
fn write_table(path: &Path, variant: &str, metrics: &MetricsReport) -> Result<(), CliError> {
    let mut out = String::from("model,precision,recall,f1_score,accuracy\n");
    out.push_str(&format!(
        "{},{:.3},{:.3},{:.3},{:.3}\n",
        variant, metrics.macro_precision, metrics.macro_recall, metrics.macro_f1, metrics.accuracy
    ));
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

fn metrics_value(m: &MetricsReport) -> serde_json::Value {
    serde_json::to_value(m).expect("metrics serialize")
}

fn per_report_value(
    cfg: &RunConfig,
    dataset: &LeadDataset,
    indices: &[usize],
    predictions: &[usize],
) -> Result<serde_json::Value, CliError> {
    let report_ids: Vec<&str> = indices
        .iter()
        .map(|&i| dataset.samples[i].report_id.as_str())
        .collect();
    let truths: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].label).collect();
    let cm = per_report_confusion(predictions, &truths, &report_ids, cfg.model.num_classes())?;
    let metrics = crate::eval::compute_metrics(&cm)?;
    Ok(serde_json::json!({
        "confusion": cm,
        "metrics": metrics_value(&metrics),
    }))
}

fn crossval_json(
    cfg: &RunConfig,
    report: &CrossValReport,
    dataset: &LeadDataset,
) -> Result<serde_json::Value, CliError> {
    let mut folds = Vec::new();
    for f in &report.folds {
        folds.push(serde_json::json!({
            "fold": f.fold,
            "test_size": f.test_indices.len(),
            "final_loss": f.curve.final_loss(),
            "confusion": f.confusion,
            "metrics": metrics_value(&f.metrics),
        }));
    }
    let mut json = serde_json::json!({
        "mode": "5fold",
        "model": cfg.variant,
        "seed": cfg.seed,
        "k": cfg.k,
        "stratified": cfg.stratified,
        "group_by_report": cfg.group_by_report,
        "folds": folds,
        "pooled_confusion": report.pooled_confusion,
        "pooled": metrics_value(&report.pooled),
        "mean_fold_accuracy": report.mean_fold_accuracy,
        "warnings": report.warnings,
    });
    if cfg.per_report {
        let mut indices = Vec::new();
        let mut predictions = Vec::new();
        for f in &report.folds {
            indices.extend_from_slice(&f.test_indices);
            predictions.extend_from_slice(&f.predictions);
        }
        json["per_report"] = per_report_value(cfg, dataset, &indices, &predictions)?;
    }
    Ok(json)
}

fn holdout_json(
    cfg: &RunConfig,
    report: &HoldoutReport,
    dataset: &LeadDataset,
) -> Result<serde_json::Value, CliError> {
    let mut json = serde_json::json!({
        "mode": "holdout",
        "model": cfg.variant,
        "seed": cfg.seed,
        "ratios": cfg.holdout_ratios,
        "stratified": cfg.stratified,
        "train_size": report.train_size,
        "val_size": report.val_size,
        "test_size": report.test_indices.len(),
        "final_loss": report.curve.final_loss(),
        "confusion": report.confusion,
        "metrics": metrics_value(&report.metrics),
    });
    if cfg.per_report {
        json["per_report"] =
            per_report_value(cfg, dataset, &report.test_indices, &report.predictions)?;
    }
    Ok(json)
}

pub struct GradcheckOutcome {
    pub variant: String,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

/// Check the variant's full forward-plus-loss against central finite
/// differences at its gradcheck geometry. The default seeds are verified
/// points; any seed works but gradients extremely close to zero sit at
/// the finite-difference noise floor.
pub fn cmd_gradcheck(
    variant: &str,
    seed: Option<u64>,
    step: f64,
    tol: f64,
    corrupt_backward: bool,
) -> Result<GradcheckOutcome, CliError> {
    let (config, default_seed) = match variant {
        "vit" => (model_config("vit", "gradcheck")?, 3),
        "swin" => (model_config("swin", "gradcheck")?, 2),
        "beit" => (model_config("beit", "gradcheck")?, 2),
        other => {
            return Err(CliError::Config(format!(
                "unknown variant {other:?} (expected vit, swin, or beit)"
            )))
        }
    };
    let seed = seed.unwrap_or(default_seed);
    let mut model = AnyModel::new(&config, seed)?;
    randomize_params(&mut model, seed, 0.25);
    let batch = standard_gradcheck_batch(config.image_side(), seed);
    let opts = GradCheckOptions { step, tol, corrupt_analytic: corrupt_backward };
    let start = Instant::now();
    let report = grad_check_model(&model, &batch, opts)?;
    Ok(GradcheckOutcome {
        variant: variant.to_string(),
        report,
        elapsed: start.elapsed(),
    })
}
