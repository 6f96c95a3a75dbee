//! Run configuration: a TOML file plus command-line overrides (flags win).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::IngestSettings;
use crate::models::{BeitConfig, ModelConfig, SwinConfig, VitConfig};
use crate::preprocess::{BinarizeConfig, LeadGridSpec, RoiRect};
use crate::train::{AdamWConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// On-disk run configuration. All sections are optional; defaults
/// reproduce the desk-scale setup.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    /// Waveform region of the report scan; omitted = whole image.
    pub roi: Option<RoiSection>,
    pub threshold: Option<u8>,
    pub grid: Option<GridSection>,
    pub resize: Option<usize>,
    pub model: Option<ModelSection>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSection {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// vit | swin | beit
    pub variant: Option<String>,
    /// tiny | gradcheck
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Named profile: google-vit | swin | beit.
    pub profile: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// 5fold | holdout
    pub mode: Option<String>,
    pub k: Option<usize>,
    pub stratified: Option<bool>,
    pub group_by_report: Option<bool>,
    pub holdout: Option<(f64, f64, f64)>,
    pub per_report: Option<bool>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// How evaluation splits the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    FiveFold,
    Holdout,
}

impl std::str::FromStr for EvalMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "5fold" => Ok(EvalMode::FiveFold),
            "holdout" => Ok(EvalMode::Holdout),
            other => Err(ConfigError::Invalid(format!(
                "eval mode must be 5fold or holdout, got {other:?}"
            ))),
        }
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub ingest: IngestSettings,
    pub model: ModelConfig,
    pub variant: String,
    pub train: TrainConfig,
    pub eval_mode: EvalMode,
    pub k: usize,
    pub stratified: bool,
    pub group_by_report: bool,
    pub holdout_ratios: (f64, f64, f64),
    pub per_report: bool,
}

/// Command-line overrides; every field beats the file when set.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub model: Option<String>,
    pub profile: Option<String>,
    pub mode: Option<String>,
}

pub fn model_config(variant: &str, preset: &str) -> Result<ModelConfig, ConfigError> {
    let cfg = match (variant, preset) {
        ("vit", "tiny") => ModelConfig::Vit(VitConfig::tiny()),
        ("vit", "gradcheck") => ModelConfig::Vit(VitConfig::gradcheck()),
        ("swin", "tiny") => ModelConfig::Swin(SwinConfig::tiny()),
        ("swin", "gradcheck") => ModelConfig::Swin(SwinConfig::gradcheck()),
        ("beit", "tiny") => ModelConfig::Beit(BeitConfig::tiny()),
        ("beit", "gradcheck") => ModelConfig::Beit(BeitConfig::gradcheck()),
        ("vit" | "swin" | "beit", other) => {
            return Err(ConfigError::Invalid(format!(
                "unknown model preset {other:?} (expected tiny or gradcheck)"
            )))
        }
        (other, _) => {
            return Err(ConfigError::Invalid(format!(
                "unknown model variant {other:?} (expected vit, swin, or beit)"
            )))
        }
    };
    Ok(cfg)
}

/// Merge the config file with CLI overrides into a resolved [`RunConfig`].
pub fn resolve(file: RunConfigFile, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let seed = overrides.seed.or(file.seed).unwrap_or(0);
    let variant = overrides
        .model
        .clone()
        .or_else(|| file.model.as_ref().and_then(|m| m.variant.clone()))
        .unwrap_or_else(|| "vit".to_string());
    let preset = file
        .model
        .as_ref()
        .and_then(|m| m.preset.clone())
        .unwrap_or_else(|| "tiny".to_string());
    let model = model_config(&variant, &preset)?;

    let train_section = file.train.clone().unwrap_or_default();
    let profile_name = overrides.profile.clone().or(train_section.profile);
    let mut train = match &profile_name {
        Some(name) => TrainConfig::profile(name).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "unknown train profile {name:?} (expected one of {:?})",
                TrainConfig::PROFILE_NAMES
            ))
        })?,
        None => TrainConfig {
            epochs: 5,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_ratio: 0.1,
            optimizer: AdamWConfig::default(),
            seed,
            decay_exclude_norm_and_bias: true,
        },
    };
    train.seed = seed;
    if let Some(v) = train_section.epochs {
        train.epochs = v;
    }
    if let Some(v) = train_section.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = train_section.base_lr {
        train.base_lr = v;
    }
    if let Some(v) = train_section.warmup_ratio {
        train.warmup_ratio = v;
    }
    if let Some(v) = train_section.weight_decay {
        train.optimizer.weight_decay = v;
    }

    let eval = file.eval.clone().unwrap_or_default();
    let mode_name = overrides
        .mode
        .clone()
        .or(eval.mode)
        .unwrap_or_else(|| "5fold".to_string());
    let eval_mode: EvalMode = mode_name.parse()?;

    let resize = file.resize.unwrap_or_else(|| model.image_side());
    let grid = file
        .grid
        .map(|g| LeadGridSpec { rows: g.rows, cols: g.cols })
        .unwrap_or_default();
    grid.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    Ok(RunConfig {
        dataset_root: overrides.dataset_root.clone().or(file.dataset_root),
        out_dir: overrides
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("out")),
        seed,
        jobs: overrides.jobs.or(file.jobs).unwrap_or(1),
        ingest: IngestSettings {
            roi: file.roi.map(|r| RoiRect { x: r.x, y: r.y, w: r.w, h: r.h }),
            binarize: BinarizeConfig {
                threshold: file.threshold.unwrap_or(40),
            },
            grid,
            resize,
        },
        model,
        variant,
        train,
        eval_mode,
        k: eval.k.unwrap_or(5),
        stratified: eval.stratified.unwrap_or(true),
        group_by_report: eval.group_by_report.unwrap_or(true),
        holdout_ratios: eval.holdout.unwrap_or((0.8, 0.0, 0.2)),
        per_report: eval.per_report.unwrap_or(false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_spec_shaped_config() {
        let text = r#"
dataset_root = "data/ecg"
out_dir = "runs/a"
seed = 7
threshold = 40
resize = 64

[roi]
x = 0
y = 300
w = 2213
h = 1272

[grid]
rows = 3
cols = 4

[model]
variant = "beit"
preset = "tiny"

[train]
profile = "beit"

[eval]
mode = "holdout"
holdout = [0.8, 0.0, 0.2]
"#;
        let file: RunConfigFile = toml::from_str(text).unwrap();
        let cfg = resolve(file, &Overrides::default()).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.variant, "beit");
        // published profile values
        assert_eq!(cfg.train.epochs, 25);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.base_lr, 6e-5);
        assert_eq!(cfg.train.warmup_ratio, 0.08);
        assert_eq!(cfg.eval_mode, EvalMode::Holdout);
        assert_eq!(cfg.ingest.roi.unwrap().y, 300);
        assert_eq!(cfg.ingest.binarize.threshold, 40);
    }

    #[test]
    fn flags_beat_file_values() {
        let file: RunConfigFile = toml::from_str("seed = 1\n[model]\nvariant = \"vit\"").unwrap();
        let overrides = Overrides {
            seed: Some(9),
            model: Some("swin".into()),
            profile: Some("swin".into()),
            mode: Some("holdout".into()),
            ..Overrides::default()
        };
        let cfg = resolve(file, &overrides).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.variant, "swin");
        assert_eq!(cfg.train.epochs, 35);
        assert_eq!(cfg.eval_mode, EvalMode::Holdout);
    }

    #[test]
    fn rejects_unknown_variant_and_mode() {
        assert!(model_config("resnet", "tiny").is_err());
        assert!("3fold".parse::<EvalMode>().is_err());
    }

    #[test]
    fn all_three_profiles_resolve() {
        for (name, epochs, batch, lr, warmup) in [
            ("google-vit", 30, 64, 9e-6, 0.1),
            ("swin", 35, 80, 4e-5, 0.1),
            ("beit", 25, 64, 6e-5, 0.08),
        ] {
            let p = TrainConfig::profile(name).unwrap();
            assert_eq!(p.epochs, epochs);
            assert_eq!(p.batch_size, batch);
            assert_eq!(p.base_lr, lr);
            assert_eq!(p.warmup_ratio, warmup);
        }
    }
}
