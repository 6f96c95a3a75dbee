//! Python bindings: preprocessing types and operations, split/metric
//! helpers, the learning-rate schedule, a single AdamW step, and forward
//! passes / gradient checks of the three model variants.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ecgformer_core::config::model_config;
use ecgformer_core::eval;
use ecgformer_core::models::{randomize_params, standard_gradcheck_batch, AnyModel};
use ecgformer_core::preprocess as pp;
use ecgformer_core::tensor::{GradCheckOptions, Tape, Tensor};
use ecgformer_core::train;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// 8-bit grayscale report scan.
#[pyclass(name = "GrayImage")]
struct PyGrayImage {
    inner: pp::GrayImage,
}

#[pymethods]
impl PyGrayImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(PyGrayImage {
            inner: pp::GrayImage::new(width, height, pixels).map_err(value_err)?,
        })
    }

    /// Build from interleaved 8-bit RGB using the 0.299/0.587/0.114
    /// luminance weights.
    #[staticmethod]
    fn from_rgb(width: usize, height: usize, rgb: Vec<u8>) -> PyResult<Self> {
        Ok(PyGrayImage {
            inner: pp::to_grayscale(&rgb, width, height).map_err(value_err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels.clone()
    }

    fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> PyResult<PyGrayImage> {
        let roi = pp::RoiRect { x, y, w, h };
        Ok(PyGrayImage {
            inner: pp::crop_roi(&self.inner, &roi).map_err(value_err)?,
        })
    }

    /// Global threshold: foreground iff intensity < threshold.
    fn binarize(&self, threshold: u8) -> PyBinaryImage {
        PyBinaryImage {
            inner: pp::binarize(&self.inner, &pp::BinarizeConfig { threshold }),
        }
    }
}

/// 1-bit waveform image, 1 = foreground.
#[pyclass(name = "BinaryImage")]
struct PyBinaryImage {
    inner: pp::BinaryImage,
}

#[pymethods]
impl PyBinaryImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<u8>) -> PyResult<Self> {
        Ok(PyBinaryImage {
            inner: pp::BinaryImage::new(width, height, pixels).map_err(value_err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn pixels(&self) -> Vec<u8> {
        self.inner.pixels.clone()
    }

    fn foreground_count(&self) -> usize {
        self.inner.foreground_count()
    }

    fn resize(&self, side: usize) -> PyResult<PyBinaryImage> {
        Ok(PyBinaryImage {
            inner: pp::resize_nearest(&self.inner, side).map_err(value_err)?,
        })
    }

    /// Split into 12 `(lead_label, image)` pairs on a rows×cols grid.
    fn split_leads(&self, rows: usize, cols: usize) -> PyResult<Vec<(String, PyBinaryImage)>> {
        let grid = pp::LeadGridSpec { rows, cols };
        let leads =
            pp::split_leads(&self.inner, &grid, &pp::LeadLabel::ALL, "py").map_err(value_err)?;
        Ok(leads
            .into_iter()
            .map(|l| (l.lead_label.to_string(), PyBinaryImage { inner: l.image }))
            .collect())
    }

    /// Row-major 0.0/1.0 floats for model input.
    fn to_floats(&self) -> Vec<f64> {
        self.inner.to_f64()
    }
}

/// Run the full report pipeline on an image file, returning 12
/// `(lead_label, image)` pairs.
#[pyfunction]
#[pyo3(signature = (path, threshold=40, rows=3, cols=4, resize=64, roi=None))]
fn preprocess_report(
    path: &str,
    threshold: u8,
    rows: usize,
    cols: usize,
    resize: usize,
    roi: Option<(usize, usize, usize, usize)>,
) -> PyResult<Vec<(String, PyBinaryImage)>> {
    let roi = roi.map(|(x, y, w, h)| pp::RoiRect { x, y, w, h });
    let leads = pp::preprocess_report(
        std::path::Path::new(path),
        roi.as_ref(),
        &pp::BinarizeConfig { threshold },
        &pp::LeadGridSpec { rows, cols },
        resize,
    )
    .map_err(value_err)?;
    Ok(leads
        .into_iter()
        .map(|l| (l.lead_label.to_string(), PyBinaryImage { inner: l.image }))
        .collect())
}

/// Seeded stratified k-fold split; returns k index lists.
#[pyfunction]
#[pyo3(signature = (labels, k=5, seed=0, stratified=true, groups=None))]
fn kfold_split(
    labels: Vec<usize>,
    k: usize,
    seed: u64,
    stratified: bool,
    groups: Option<Vec<String>>,
) -> PyResult<Vec<Vec<usize>>> {
    let split =
        eval::kfold_split(&labels, k, seed, stratified, groups.as_deref()).map_err(value_err)?;
    Ok(split.folds)
}

/// Seeded train/val/test split with floor-sized val and test buckets.
#[pyfunction]
#[pyo3(signature = (labels, ratios=(0.8, 0.0, 0.2), seed=0, stratified=true))]
fn holdout_split(
    labels: Vec<usize>,
    ratios: (f64, f64, f64),
    seed: u64,
    stratified: bool,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let split = eval::holdout_split(&labels, ratios, seed, stratified).map_err(value_err)?;
    Ok((split.train, split.val, split.test))
}

/// Count a confusion matrix (rows = true class, cols = predicted).
#[pyfunction]
#[pyo3(signature = (predictions, truths, classes=4))]
fn confusion_matrix(
    predictions: Vec<usize>,
    truths: Vec<usize>,
    classes: usize,
) -> PyResult<Vec<Vec<u64>>> {
    let cm = eval::confusion(&predictions, &truths, classes).map_err(value_err)?;
    Ok((0..classes)
        .map(|t| (0..classes).map(|p| cm.get(t, p)).collect())
        .collect())
}

/// Precision/recall/F1/accuracy summary of a confusion matrix.
#[pyclass(name = "MetricsReport")]
struct PyMetricsReport {
    #[pyo3(get)]
    accuracy: f64,
    #[pyo3(get)]
    macro_precision: f64,
    #[pyo3(get)]
    macro_recall: f64,
    #[pyo3(get)]
    macro_f1: f64,
    #[pyo3(get)]
    weighted_precision: f64,
    #[pyo3(get)]
    weighted_recall: f64,
    #[pyo3(get)]
    weighted_f1: f64,
    #[pyo3(get)]
    samples: u64,
    /// Per class `(precision, recall, f1, support)`.
    #[pyo3(get)]
    per_class: Vec<(f64, f64, f64, u64)>,
}

#[pyfunction]
fn compute_metrics(matrix: Vec<Vec<u64>>) -> PyResult<PyMetricsReport> {
    let classes = matrix.len();
    let mut cm = eval::ConfusionMatrix::new(classes);
    for (t, row) in matrix.iter().enumerate() {
        if row.len() != classes {
            return Err(value_err("confusion matrix must be square"));
        }
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                cm.increment(t, p);
            }
        }
    }
    let m = eval::compute_metrics(&cm).map_err(value_err)?;
    Ok(PyMetricsReport {
        accuracy: m.accuracy,
        macro_precision: m.macro_precision,
        macro_recall: m.macro_recall,
        macro_f1: m.macro_f1,
        weighted_precision: m.weighted_precision,
        weighted_recall: m.weighted_recall,
        weighted_f1: m.weighted_f1,
        samples: m.samples,
        per_class: m
            .per_class
            .iter()
            .map(|c| (c.precision, c.recall, c.f1, c.support))
            .collect(),
    })
}

/// Linear warmup to `base_lr`, then linear decay to zero.
#[pyfunction]
fn lr_at_step(step: u64, total_steps: u64, base_lr: f64, warmup_ratio: f64) -> PyResult<f64> {
    train::lr_at_step(step, total_steps, base_lr, warmup_ratio).map_err(value_err)
}

/// Updated `(theta, m, v, t)` of one AdamW step.
type AdamWStepResult = (Vec<f64>, Vec<f64>, Vec<f64>, u64);

/// One AdamW update on a flat parameter vector.
#[pyfunction]
#[pyo3(signature = (theta, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01))]
#[allow(clippy::too_many_arguments)]
fn adamw_step(
    theta: Vec<f64>,
    grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> PyResult<AdamWStepResult> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(value_err("theta, grad, m, v must have equal lengths"));
    }
    let mut params = ecgformer_core::models::ParamSet::default();
    params.insert(
        "w",
        Tensor::new(vec![theta.len()], theta).map_err(value_err)?,
    );
    let mut state = train::OptimizerState { m: vec![m], v: vec![v], t };
    let cfg = train::AdamWConfig { beta1, beta2, eps, weight_decay };
    train::adamw_step(&mut params, &[grad], &mut state, lr, &cfg, &[false])
        .map_err(runtime_err)?;
    let theta = params.get("w").unwrap().values().to_vec();
    Ok((
        theta,
        state.m.remove(0),
        state.v.remove(0),
        state.t,
    ))
}

/// Published per-variant training profile as
/// `(epochs, batch, base_lr, warmup_ratio)`.
#[pyfunction]
fn train_profile(name: &str) -> PyResult<(usize, usize, f64, f64)> {
    let p = train::TrainConfig::profile(name)
        .ok_or_else(|| value_err(format!("unknown profile {name:?}")))?;
    Ok((p.epochs, p.batch_size, p.base_lr, p.warmup_ratio))
}

fn build_model(variant: &str, preset: &str, seed: u64) -> PyResult<AnyModel> {
    let config = model_config(variant, preset).map_err(value_err)?;
    AnyModel::new(&config, seed).map_err(runtime_err)
}

/// Class logits of a seeded, freshly initialized model on one image of
/// 0/1 floats.
#[pyfunction]
#[pyo3(signature = (variant, image, seed=0, preset="tiny"))]
fn model_logits(variant: &str, image: Vec<f64>, seed: u64, preset: &str) -> PyResult<Vec<f64>> {
    let model = build_model(variant, preset, seed)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let logits = model.forward(&mut tape, &bound, &image).map_err(runtime_err)?;
    Ok(tape.values(logits).to_vec())
}

/// Finite-difference check of a variant's full forward+loss; returns
/// `(passed, max_rel_err)`.
#[pyfunction]
#[pyo3(signature = (variant, seed=None, step=1e-5, tol=1e-4))]
fn gradcheck(variant: &str, seed: Option<u64>, step: f64, tol: f64) -> PyResult<(bool, f64)> {
    let default_seed = match variant {
        "vit" => 3,
        "swin" | "beit" => 2,
        _ => 0,
    };
    let seed = seed.unwrap_or(default_seed);
    let mut model = build_model(variant, "gradcheck", seed)?;
    randomize_params(&mut model, seed, 0.25);
    let batch = standard_gradcheck_batch(model.image_side(), seed);
    let report =
        ecgformer_core::models::grad_check_model(&model, &batch, GradCheckOptions::new(step, tol))
            .map_err(runtime_err)?;
    Ok((report.passed, report.max_rel_err))
}

#[pymodule]
fn ecgformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrayImage>()?;
    m.add_class::<PyBinaryImage>()?;
    m.add_class::<PyMetricsReport>()?;
    m.add_function(wrap_pyfunction!(preprocess_report, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(holdout_split, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_step, m)?)?;
    m.add_function(wrap_pyfunction!(adamw_step, m)?)?;
    m.add_function(wrap_pyfunction!(train_profile, m)?)?;
    m.add_function(wrap_pyfunction!(model_logits, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
