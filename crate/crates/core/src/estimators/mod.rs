//! Trainable post-hoc estimators and confidence calibrators.

pub mod boost;
pub mod classifier;
pub mod detection;
pub mod mlp;
pub mod scaling;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use boost::{BoostConfig, BoostedEnsemble};
pub use classifier::BoostedClassifier;
pub use detection::DetectionCalibrator;
pub use mlp::{Mlp, MlpConfig};
pub use scaling::{fit_temperature, fit_vector, ScalingCalibrator, VectorFitConfig};

/// Estimator selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Boosted regression trees on the feature vector.
    Boost,
    Mlp,
    /// Mean combined confidence (detection) or max softmax probability.
    Confidence,
    /// Temperature-scaled confidence.
    Temp,
    /// Vector-scaled max probability (classification only).
    Vector,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Boost => "boost",
            EstimatorKind::Mlp => "mlp",
            EstimatorKind::Confidence => "confidence",
            EstimatorKind::Temp => "temp",
            EstimatorKind::Vector => "vector",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boost" => Ok(EstimatorKind::Boost),
            "mlp" => Ok(EstimatorKind::Mlp),
            "confidence" => Ok(EstimatorKind::Confidence),
            "temp" => Ok(EstimatorKind::Temp),
            "vector" => Ok(EstimatorKind::Vector),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}
