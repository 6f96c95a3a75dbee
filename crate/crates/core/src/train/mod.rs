//! Training loop: AdamW with decoupled weight decay, linear warmup →
//! linear decay schedule, seeded shuffling, and loss-curve logging.
//!
//! Gradients live on a fresh tape each step, so they start from zero; the
//! optimizer update runs after `backward`, then the tape is dropped.
//! Everything is deterministic given the seed.

mod adamw;
mod grid;
mod schedule;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use grid::{grid_search, GridAxes, GridCell, GridOutcome, GridStatus, ValidationSplit};
pub use schedule::lr_at_step;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LeadDataset;
use crate::models::{AnyModel, ModelConfig, ModelError, ParamSet};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("total step count is zero")]
    ZeroTotalSteps,
    #[error("step {step} beyond total steps {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite gradient for {param} at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("non-finite loss at step {step}; aborted with last good parameters")]
    Diverged {
        step: u64,
        last_good: Box<ParamSet>,
        curve: LossCurve,
    },
    #[error("grid axis {0} is empty")]
    EmptyGridAxis(&'static str),
    #[error("every grid cell failed")]
    AllCellsFailed,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Optimizer and schedule settings for one run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Skip decoupled weight decay for norm parameters and biases.
    pub decay_exclude_norm_and_bias: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::InvalidConfig(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        Ok(())
    }

    /// Published training profiles: epochs, batch, learning rate, and
    /// warmup ratio per variant, AdamW throughout.
    pub fn profile(name: &str) -> Option<TrainConfig> {
        let (epochs, batch_size, base_lr, warmup_ratio) = match name {
            "google-vit" => (30, 64, 9e-6, 0.1),
            "swin" => (35, 80, 4e-5, 0.1),
            "beit" => (25, 64, 6e-5, 0.08),
            _ => return None,
        };
        Some(TrainConfig {
            epochs,
            batch_size,
            base_lr,
            warmup_ratio,
            optimizer: AdamWConfig::default(),
            seed: 0,
            decay_exclude_norm_and_bias: true,
        })
    }

    pub const PROFILE_NAMES: [&'static str; 3] = ["google-vit", "swin", "beit"];
}

/// One `(step, epoch, mean batch loss)` record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Ordered loss records with strictly increasing steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    fn push(&mut self, step: u64, epoch: usize, loss: f64) {
        debug_assert!(self.points.last().map(|p| p.step < step).unwrap_or(true));
        self.points.push(LossPoint { step, epoch, loss });
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.step, p.epoch, p.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }
}

pub struct TrainOutput {
    pub model: AnyModel,
    pub curve: LossCurve,
}

impl std::fmt::Debug for TrainOutput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainOutput")
            .field("params", &self.model.params().len())
            .field("steps", &self.curve.points.len())
            .finish()
    }
}

/// Train a freshly initialized model on the dataset.
pub fn train(
    dataset: &LeadDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    let mut model = AnyModel::new(model_cfg, cfg.seed)?;
    let curve = train_model(&mut model, dataset, cfg)?;
    Ok(TrainOutput { model, curve })
}

/// Train an existing model in place, returning the loss curve.
///
/// Per batch: forward → cross-entropy → backward → schedule → AdamW step.
/// The shuffle is reseeded per run, the last partial batch is trained, and
/// two runs with the same seed produce bit-identical parameters and curves.
pub fn train_model(
    model: &mut AnyModel,
    dataset: &LeadDataset,
    cfg: &TrainConfig,
) -> Result<LossCurve, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.config().num_classes();
    for sample in &dataset.samples {
        if sample.label >= classes {
            return Err(TrainError::BadLabel { label: sample.label, classes });
        }
    }

    let n = dataset.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model.params());
    let exclude = decay_exclusions(model.params(), cfg.decay_exclude_norm_and_bias);
    let mut curve = LossCurve::default();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        for batch in indices.chunks(cfg.batch_size) {
            let mut tape = crate::tensor::Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &dataset.samples[i];
                rows.push(model.forward(&mut tape, &bound, &sample.image)?);
                labels.push(sample.label);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let loss_val = tape.values(loss)[0];
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    last_good: Box::new(model.params().clone()),
                    curve,
                });
            }
            curve.push(step, epoch, loss_val);
            tape.backward(loss)?;

            let grads: Vec<Vec<f64>> = bound
                .iter()
                .map(|(_, id)| {
                    tape.grad(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.values(id).len()])
                })
                .collect();
            let lr = lr_at_step(step, total_steps, cfg.base_lr, cfg.warmup_ratio)?;
            adamw_step(model.params_mut(), &grads, &mut state, lr, &cfg.optimizer, &exclude)
                .map_err(|e| match e {
                    AdamWStepError::NonFiniteGradient { param } => {
                        TrainError::NonFiniteGradient { param, step }
                    }
                })?;
            step += 1;
        }
    }
    Ok(curve)
}

pub use adamw::AdamWStepError;

/// Per-parameter weight-decay exclusion flags, by name.
pub fn decay_exclusions(params: &ParamSet, exclude_norm_and_bias: bool) -> Vec<bool> {
    params
        .iter()
        .map(|(name, _)| {
            exclude_norm_and_bias
                && name
                    .split('.')
                    .any(|seg| seg.starts_with("norm") || seg.contains("bias"))
        })
        .collect()
}

/// Fraction of samples whose argmax logit matches the label.
pub fn train_accuracy(model: &AnyModel, dataset: &LeadDataset) -> Result<f64, ModelError> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, dataset)?;
    let hits = preds
        .iter()
        .zip(&dataset.samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Argmax class per sample; ties resolve to the lowest class index.
pub fn predict(model: &AnyModel, dataset: &LeadDataset) -> Result<Vec<usize>, ModelError> {
    let mut preds = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(64) {
        let mut tape = crate::tensor::Tape::new();
        let bound = model.bind(&mut tape, false);
        for sample in chunk {
            let logits = model.forward(&mut tape, &bound, &sample.image)?;
            let values = tape.values(logits);
            let mut best = 0;
            for (c, &v) in values.iter().enumerate() {
                if v > values[best] {
                    best = c;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}
