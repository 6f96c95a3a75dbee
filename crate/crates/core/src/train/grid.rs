//! Grid search over learning rate, epochs, and batch size.

use super::{train, train_accuracy, TrainConfig, TrainError};
use crate::dataset::LeadDataset;
use crate::models::ModelConfig;

/// Candidate values per hyperparameter; the grid is their Cartesian
/// product.
#[derive(Debug, Clone)]
pub struct GridAxes {
    pub base_lrs: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_sizes: Vec<usize>,
}

/// Index split used to score cells.
#[derive(Debug, Clone)]
pub struct ValidationSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum GridStatus {
    Ok { val_accuracy: f64 },
    Failed { message: String },
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub config: TrainConfig,
    pub status: GridStatus,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: TrainConfig,
    pub best_accuracy: f64,
    pub cells: Vec<GridCell>,
}

/// Train one model per cell and pick the highest validation accuracy.
/// Ties break toward lower learning rate, then fewer epochs, then smaller
/// batch. Failed cells are recorded and skipped.
pub fn grid_search(
    dataset: &LeadDataset,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    axes: &GridAxes,
    split: &ValidationSplit,
) -> Result<GridOutcome, TrainError> {
    if axes.base_lrs.is_empty() {
        return Err(TrainError::EmptyGridAxis("base_lrs"));
    }
    if axes.epochs.is_empty() {
        return Err(TrainError::EmptyGridAxis("epochs"));
    }
    if axes.batch_sizes.is_empty() {
        return Err(TrainError::EmptyGridAxis("batch_sizes"));
    }
    let train_set = dataset.subset(&split.train);
    let val_set = dataset.subset(&split.val);

    let mut cells = Vec::new();
    for &lr in &axes.base_lrs {
        for &epochs in &axes.epochs {
            for &batch_size in &axes.batch_sizes {
                let config = TrainConfig {
                    base_lr: lr,
                    epochs,
                    batch_size,
                    ..base.clone()
                };
                let status = match train(&train_set, model_cfg, &config) {
                    Ok(out) => match train_accuracy(&out.model, &val_set) {
                        Ok(val_accuracy) => GridStatus::Ok { val_accuracy },
                        Err(e) => GridStatus::Failed { message: e.to_string() },
                    },
                    Err(e) => GridStatus::Failed { message: e.to_string() },
                };
                cells.push(GridCell { config, status });
            }
        }
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, cell) in cells.iter().enumerate() {
        let GridStatus::Ok { val_accuracy } = cell.status else { continue };
        let better = match best {
            None => true,
            Some((bi, bacc)) => {
                let b = &cells[bi].config;
                let c = &cell.config;
                val_accuracy > bacc
                    || (val_accuracy == bacc
                        && (c.base_lr, c.epochs, c.batch_size) < (b.base_lr, b.epochs, b.batch_size))
            }
        };
        if better {
            best = Some((i, val_accuracy));
        }
    }
    let (best_idx, best_accuracy) = best.ok_or(TrainError::AllCellsFailed)?;
    Ok(GridOutcome {
        best: cells[best_idx].config.clone(),
        best_accuracy,
        cells,
    })
}
