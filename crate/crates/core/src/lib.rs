//! Post-hoc performance estimation for black-box models.
//!
//! Given recorded outputs of detectors or classifiers together with ground
//! truth, this crate trains lightweight estimators that predict a per-example
//! performance metric (F1, precision, recall or accuracy) from summary
//! features of the model output and the input image. The estimates drive
//! three applications: choosing the best model per input, deciding which
//! inputs a device should offload to a server, and re-estimating performance
//! after a dataset shift.
//!
//! Module map:
//!
//! - [`data`]: record types, the line-delimited corpus format, splitting,
//!   class-prior resampling and a synthetic corpus generator.
//! - [`metrics`]: IoU, greedy matching and per-image metrics.
//! - [`features`]: handcrafted per-image features and the fitted
//!   class/location score models.
//! - [`estimators`]: boosted regression trees, a small MLP, scaling
//!   calibrators and the detection confidence calibrator.
//! - [`calibration`]: ECE, reliability bins, Spearman and R².
//! - [`usecases`]: offloading, model selection, dataset shift and the
//!   sample-complexity study.

pub mod calibration;
pub mod data;
pub mod error;
pub mod estimators;
pub mod features;
pub mod metrics;
pub mod usecases;

pub use error::{Error, Result};
