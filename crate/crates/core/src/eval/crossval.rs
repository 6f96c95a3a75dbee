//! Cross-validation and holdout drivers.

use rayon::prelude::*;

use super::metrics::{compute_metrics, confusion, ConfusionMatrix, MetricsReport};
use super::split::{holdout_split, kfold_split};
use super::EvalError;
use crate::dataset::LeadDataset;
use crate::models::ModelConfig;
use crate::train::{predict, train, LossCurve, TrainConfig};

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub curve: LossCurve,
    /// Held-out sample indices into the evaluated dataset.
    pub test_indices: Vec<usize>,
    /// Predicted class per held-out sample, parallel to `test_indices`.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CrossValReport {
    pub folds: Vec<FoldReport>,
    /// Confusion counts pooled over all held-out folds (micro view).
    pub pooled_confusion: ConfusionMatrix,
    pub pooled: MetricsReport,
    /// Unweighted mean of per-fold accuracies.
    pub mean_fold_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Train on `k−1` folds and score the held-out fold, `k` times; folds run
/// concurrently on up to `jobs` threads. Per-fold model seeds derive from
/// the train seed plus the fold index, so reports are reproducible.
pub fn cross_validate(
    dataset: &LeadDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    k: usize,
    stratified: bool,
    group_by_report: bool,
    jobs: usize,
) -> Result<CrossValReport, EvalError> {
    let labels = dataset.labels();
    let groups: Option<Vec<String>> = group_by_report
        .then(|| dataset.samples.iter().map(|s| s.report_id.clone()).collect());
    let split = kfold_split(&labels, k, train_cfg.seed, stratified, groups.as_deref())?;
    let classes = model_cfg.num_classes();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let fold_results: Vec<Result<FoldReport, EvalError>> = pool.install(|| {
        (0..k)
            .into_par_iter()
            .map(|fold| {
                let train_idx = split.train_indices(fold);
                let test_idx = &split.folds[fold];
                let train_set = dataset.subset(&train_idx);
                let test_set = dataset.subset(test_idx);
                let fold_cfg = TrainConfig {
                    seed: train_cfg.seed.wrapping_add(fold as u64),
                    ..train_cfg.clone()
                };
                let out = train(&train_set, model_cfg, &fold_cfg)?;
                let preds = predict(&out.model, &test_set)?;
                let cm = confusion(&preds, &test_set.labels(), classes)?;
                let metrics = compute_metrics(&cm)?;
                Ok(FoldReport {
                    fold,
                    confusion: cm,
                    metrics,
                    curve: out.curve,
                    test_indices: test_idx.clone(),
                    predictions: preds,
                })
            })
            .collect()
    });

    let mut folds = Vec::with_capacity(k);
    for result in fold_results {
        folds.push(result?);
    }
    let mut pooled_confusion = ConfusionMatrix::new(classes);
    for f in &folds {
        pooled_confusion.merge(&f.confusion);
    }
    let pooled = compute_metrics(&pooled_confusion)?;
    let mean_fold_accuracy =
        folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(CrossValReport {
        folds,
        pooled_confusion,
        pooled,
        mean_fold_accuracy,
        warnings: split.warnings,
    })
}

#[derive(Debug, Clone)]
pub struct HoldoutReport {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub curve: LossCurve,
    pub train_size: usize,
    pub val_size: usize,
    pub test_indices: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Train once on the train split and score the test split.
pub fn holdout_evaluate(
    dataset: &LeadDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ratios: (f64, f64, f64),
    stratified: bool,
) -> Result<HoldoutReport, EvalError> {
    let labels = dataset.labels();
    let split = holdout_split(&labels, ratios, train_cfg.seed, stratified)?;
    let train_set = dataset.subset(&split.train);
    let test_set = dataset.subset(&split.test);
    let out = train(&train_set, model_cfg, train_cfg)?;
    let preds = predict(&out.model, &test_set)?;
    let cm = confusion(&preds, &test_set.labels(), model_cfg.num_classes())?;
    let metrics = compute_metrics(&cm)?;
    Ok(HoldoutReport {
        confusion: cm,
        metrics,
        curve: out.curve,
        train_size: split.train.len(),
        val_size: split.val.len(),
        test_indices: split.test,
        predictions: preds,
    })
}

/// Score the test split of a holdout with an already-trained model; no
/// training happens, so the loss curve is empty.
pub fn holdout_evaluate_checkpoint(
    dataset: &LeadDataset,
    model: &crate::models::AnyModel,
    ratios: (f64, f64, f64),
    stratified: bool,
    seed: u64,
) -> Result<HoldoutReport, EvalError> {
    let labels = dataset.labels();
    let split = holdout_split(&labels, ratios, seed, stratified)?;
    let test_set = dataset.subset(&split.test);
    let preds = predict(model, &test_set)?;
    let classes = model.config().num_classes();
    let cm = confusion(&preds, &test_set.labels(), classes)?;
    let metrics = compute_metrics(&cm)?;
    Ok(HoldoutReport {
        confusion: cm,
        metrics,
        curve: LossCurve::default(),
        train_size: split.train.len(),
        val_size: split.val.len(),
        test_indices: split.test,
        predictions: preds,
    })
}

/// Majority vote over the per-lead predictions of each report; ties
/// resolve to the lowest class index. Returns `(report_id, class)` in
/// order of first appearance.
pub fn per_report_majority(
    predictions: &[usize],
    report_ids: &[&str],
    classes: usize,
) -> Vec<(String, usize)> {
    let mut order: Vec<&str> = Vec::new();
    let mut votes: Vec<Vec<u64>> = Vec::new();
    for (&p, &r) in predictions.iter().zip(report_ids) {
        let pos = match order.iter().position(|o| *o == r) {
            Some(pos) => pos,
            None => {
                order.push(r);
                votes.push(vec![0; classes]);
                order.len() - 1
            }
        };
        if p < classes {
            votes[pos][p] += 1;
        }
    }
    order
        .into_iter()
        .zip(votes)
        .map(|(r, v)| {
            let mut best = 0;
            for (c, &count) in v.iter().enumerate() {
                if count > v[best] {
                    best = c;
                }
            }
            (r.to_string(), best)
        })
        .collect()
}

/// Reduce per-lead predictions to one decision per report and count a
/// report-level confusion matrix.
pub fn per_report_confusion(
    predictions: &[usize],
    truths: &[usize],
    report_ids: &[&str],
    classes: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: predictions.len(),
            truths: truths.len(),
        });
    }
    let majority = per_report_majority(predictions, report_ids, classes);
    let mut cm = ConfusionMatrix::new(classes);
    for (report, pred) in &majority {
        let truth_idx = report_ids
            .iter()
            .position(|r| r == report)
            .expect("report came from this list");
        let truth = truths[truth_idx];
        if truth >= classes || *pred >= classes {
            return Err(EvalError::LabelOutOfRange {
                label: truth.max(*pred),
                classes,
            });
        }
        cm.increment(truth, *pred);
    }
    Ok(cm)
}
