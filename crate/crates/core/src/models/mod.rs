//! From-scratch vision-transformer variants over the tape engine.
//!
//! Three architectures share the same building blocks: global patch
//! attention with a CLS readout ([`vit`]), shifted-window hierarchical
//! attention with patch merging ([`swin`]), and relative-position-bias
//! attention with mean-pooled classification ([`beit`]). All parameters are
//! f64 tensors created in a fixed order from a seeded RNG, so identical
//! seeds give identical models.

mod attention;
mod beit;
mod checkpoint;
mod swin;
mod vit;

pub use attention::mean_rows;
pub use beit::{relative_position_index, BeitModel};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use swin::{
    cyclic_shift, cyclic_shift_order, inverse_permutation, shift_attention_mask,
    window_partition, window_reverse, window_row_order, AttnTrace, SwinModel, MASK_FILL,
};
pub use vit::VitModel;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DiseaseClass;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} image values ({side}x{side}), got {got}")]
    BadImage {
        expected: usize,
        side: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io error on {path}: {source}")]
    CheckpointIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {message}")]
    BadCheckpoint { path: PathBuf, message: String },
}

/// Architecture hyperparameters for the plain global-attention variant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VitConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub dropout: f64,
}

impl VitConfig {
    /// CPU-trainable default geometry.
    pub fn tiny() -> Self {
        VitConfig {
            image_side: 64,
            patch_side: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: DiseaseClass::COUNT,
            dropout: 0.0,
        }
    }

    /// Very small geometry for finite-difference checking.
    pub fn gradcheck() -> Self {
        VitConfig {
            image_side: 16,
            patch_side: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: DiseaseClass::COUNT,
            dropout: 0.0,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_side == 0 || self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(ModelError::InvalidConfig(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes != DiseaseClass::COUNT {
            return Err(ModelError::InvalidConfig(format!(
                "this task has {} classes, config says {}",
                DiseaseClass::COUNT,
                self.num_classes
            )));
        }
        if self.depth == 0 {
            return Err(ModelError::InvalidConfig("depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hyperparameters for the shifted-window hierarchical variant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SwinConfig {
    pub image_side: usize,
    pub patch_side: usize,
    /// Embed dim of the first stage; each merge doubles it.
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_side: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl SwinConfig {
    pub fn tiny() -> Self {
        SwinConfig {
            image_side: 64,
            patch_side: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![4, 4],
            window_side: 4,
            mlp_ratio: 4.0,
            num_classes: DiseaseClass::COUNT,
        }
    }

    /// Small geometry that still exercises the shifted-window path. Both
    /// stages keep the feature-map side above the window side, so shifted
    /// windows retain multi-token regions (a side equal to the window
    /// side would mask every cross-token pair).
    pub fn gradcheck() -> Self {
        SwinConfig {
            image_side: 16,
            patch_side: 2,
            embed_dim: 8,
            depths: vec![2, 2],
            heads: vec![2, 2],
            window_side: 2,
            mlp_ratio: 2.0,
            num_classes: DiseaseClass::COUNT,
        }
    }

    /// Shift applied by odd-indexed blocks within a stage.
    pub fn shift(&self) -> usize {
        self.window_side / 2
    }

    /// Feature-map side at stage `s`.
    pub fn stage_side(&self, s: usize) -> usize {
        (self.image_side / self.patch_side) >> s
    }

    /// Embed dim at stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.depths.len() - 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_side == 0 || self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(ModelError::InvalidConfig(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(ModelError::InvalidConfig(
                "depths and heads must be nonempty and equal length".into(),
            ));
        }
        if self.num_classes != DiseaseClass::COUNT {
            return Err(ModelError::InvalidConfig(format!(
                "this task has {} classes, config says {}",
                DiseaseClass::COUNT,
                self.num_classes
            )));
        }
        for s in 0..self.depths.len() {
            let side = self.stage_side(s);
            if side == 0 || !side.is_multiple_of(self.window_side) {
                return Err(ModelError::InvalidConfig(format!(
                    "stage {s} side {side} not divisible by window side {}",
                    self.window_side
                )));
            }
            let dim = self.stage_dim(s);
            if !dim.is_multiple_of(self.heads[s]) {
                return Err(ModelError::InvalidConfig(format!(
                    "stage {s} dim {dim} not divisible by heads {}",
                    self.heads[s]
                )));
            }
            if s + 1 < self.depths.len() && !side.is_multiple_of(2) {
                return Err(ModelError::InvalidConfig(format!(
                    "stage {s} side {side} must be even to merge patches"
                )));
            }
        }
        Ok(())
    }
}

/// Hyperparameters for the relative-position-bias variant with mean-pooled
/// classification.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BeitConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub dropout: f64,
}

impl BeitConfig {
    pub fn tiny() -> Self {
        BeitConfig {
            image_side: 64,
            patch_side: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: DiseaseClass::COUNT,
            dropout: 0.0,
        }
    }

    pub fn gradcheck() -> Self {
        BeitConfig {
            image_side: 16,
            patch_side: 8,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: DiseaseClass::COUNT,
            dropout: 0.0,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Rows of each per-layer bias table: one for every 2-D offset.
    pub fn bias_table_rows(&self) -> usize {
        let g = self.grid_side();
        (2 * g - 1) * (2 * g - 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        // geometry rules coincide with the plain variant's
        VitConfig {
            image_side: self.image_side,
            patch_side: self.patch_side,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
            dropout: self.dropout,
        }
        .validate()
    }
}

/// Which of the three architectures to build.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Vit(VitConfig),
    Swin(SwinConfig),
    Beit(BeitConfig),
}

impl ModelConfig {
    pub fn image_side(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.image_side,
            ModelConfig::Swin(c) => c.image_side,
            ModelConfig::Beit(c) => c.image_side,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.num_classes,
            ModelConfig::Swin(c) => c.num_classes,
            ModelConfig::Beit(c) => c.num_classes,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            ModelConfig::Vit(_) => "vit",
            ModelConfig::Swin(_) => "swin",
            ModelConfig::Beit(_) => "beit",
        }
    }
}

/// Named parameter tensors in fixed creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter onto the tape as a leaf, in stored order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut bound = BoundParams::default();
        for (name, tensor) in &self.entries {
            let mut leaf = tensor.clone();
            leaf.requires_grad = trainable;
            bound.ids.push((name.clone(), tape.leaf(leaf)));
        }
        bound
    }
}

/// Tape handles for one bound parameter set, parallel to its [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    ids: Vec<(String, TensorId)>,
}

impl BoundParams {
    pub fn push(&mut self, name: impl Into<String>, id: TensorId) {
        self.ids.push((name.into(), id));
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

/// Move every parameter to a generic random point: weights, biases, and
/// bias tables from a truncated normal of the given std, norm gains
/// centered at 1. Gradient checks run here rather than at the training
/// init, where near-zero gradients would drown in finite-difference noise.
pub fn randomize_params(model: &mut AnyModel, seed: u64, std: f64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for (name, tensor) in model.params_mut().iter_mut() {
        let center = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        for v in tensor.values_mut() {
            let z: f64 = loop {
                let z: f64 = StandardNormal.sample(&mut rng);
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            *v = center + z * std;
        }
    }
}

/// Run the finite-difference checker over every parameter of a model's
/// full forward-plus-loss on a small labeled batch.
pub fn grad_check_model(
    model: &AnyModel,
    batch: &[(Vec<f64>, usize)],
    opts: crate::tensor::GradCheckOptions,
) -> Result<crate::tensor::GradCheckReport, ModelError> {
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, t)| t.clone().with_grad())
        .collect();
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let report = crate::tensor::grad_check_multi(
        |tape, ids| {
            let mut bound = BoundParams::default();
            for (name, id) in names.iter().zip(ids) {
                bound.push(name.clone(), *id);
            }
            let mut rows = Vec::with_capacity(batch.len());
            for (image, _) in batch {
                rows.push(
                    model
                        .forward(tape, &bound, image)
                        .map_err(ModelError::into_tensor)?,
                );
            }
            let logits = tape.concat_rows(&rows)?;
            tape.cross_entropy(logits, &labels)
        },
        &inputs,
        opts,
    )?;
    Ok(report)
}

impl ModelError {
    /// For gradcheck closures: config and image shapes are validated before
    /// the sweep, so only tensor errors can legitimately surface inside it.
    fn into_tensor(self) -> TensorError {
        match self {
            ModelError::Tensor(t) => t,
            other => panic!("non-tensor model error inside gradcheck: {other}"),
        }
    }
}

/// Seeded truncated-normal initializer: values beyond two standard
/// deviations are resampled.
pub(crate) struct Init {
    rng: ChaCha20Rng,
    std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha20Rng::seed_from_u64(seed),
            std: 0.02,
        }
    }

    pub fn trunc_normal(&mut self, dims: Vec<usize>) -> Tensor {
        let n: usize = dims.iter().product();
        let values = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * self.std;
                }
            })
            .collect();
        Tensor::new(dims, values).expect("init tensor")
    }

    pub fn zeros(&self, dims: Vec<usize>) -> Tensor {
        Tensor::zeros(dims)
    }

    pub fn ones(&self, dims: Vec<usize>) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims, vec![1.0; n]).expect("init tensor")
    }
}

/// Uniform entry point over the three architectures.
pub enum AnyModel {
    Vit(VitModel),
    Swin(SwinModel),
    Beit(BeitModel),
}

impl AnyModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Ok(match config {
            ModelConfig::Vit(c) => AnyModel::Vit(VitModel::new(c.clone(), seed)?),
            ModelConfig::Swin(c) => AnyModel::Swin(SwinModel::new(c.clone(), seed)?),
            ModelConfig::Beit(c) => AnyModel::Beit(BeitModel::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            AnyModel::Vit(m) => ModelConfig::Vit(m.cfg.clone()),
            AnyModel::Swin(m) => ModelConfig::Swin(m.cfg.clone()),
            AnyModel::Beit(m) => ModelConfig::Beit(m.cfg.clone()),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            AnyModel::Vit(m) => &m.params,
            AnyModel::Swin(m) => &m.params,
            AnyModel::Beit(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            AnyModel::Vit(m) => &mut m.params,
            AnyModel::Swin(m) => &mut m.params,
            AnyModel::Beit(m) => &mut m.params,
        }
    }

    pub fn image_side(&self) -> usize {
        self.config().image_side()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        self.params().bind(tape, trainable)
    }

    /// Logits `[1 × num_classes]` for one image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: &[f64],
    ) -> Result<TensorId, ModelError> {
        match self {
            AnyModel::Vit(m) => m.forward(tape, bound, image),
            AnyModel::Swin(m) => m.forward(tape, bound, image),
            AnyModel::Beit(m) => m.forward(tape, bound, image),
        }
    }
}

/// Standard gradcheck batch: four random binary images labeled 0..4.
pub fn standard_gradcheck_batch(side: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    use rand::Rng;
    (0..4)
        .map(|label| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed * 100 + label as u64);
            let image = (0..side * side)
                .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
                .collect();
            (image, label)
        })
        .collect()
}

/// Insert an image as a constant `[side × side]` leaf.
pub(crate) fn image_leaf(
    tape: &mut Tape,
    image: &[f64],
    side: usize,
) -> Result<TensorId, ModelError> {
    if image.len() != side * side {
        return Err(ModelError::BadImage {
            expected: side * side,
            side,
            got: image.len(),
        });
    }
    let t = Tensor::new(vec![side, side], image.to_vec()).map_err(ModelError::Tensor)?;
    Ok(tape.constant(t))
}
