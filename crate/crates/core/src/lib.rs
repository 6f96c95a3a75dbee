//! From-scratch laboratory for heart-disease detection on ECG report images:
//! per-lead preprocessing, three vision-transformer variants on a dense f64
//! autodiff engine, an AdamW training loop, and a k-fold/holdout evaluation
//! harness.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod models;
pub mod preprocess;
pub mod tensor;
pub mod train;
