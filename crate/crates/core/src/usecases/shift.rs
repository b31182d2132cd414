//! Performance estimation after a dataset shift: a logit calibrator `f_c`
//! fitted on one split, post-hoc estimators of `f_c ∘ f` on another.

use serde::{Deserialize, Serialize};

use super::posthoc::{PipelineSpec, PosthocModel, TrainSpec};
use crate::calibration::{outcome_histogram, CalibrationReport, OutcomeBin, DEFAULT_BINS};
use crate::data::{Corpus, ImageRecord, Split, Task};
use crate::error::{Error, Result};
use crate::estimators::{fit_vector, BoostConfig, EstimatorKind, MlpConfig, ScalingCalibrator, VectorFitConfig};
use crate::features::{ImageFeatureConfig, Profile};
use crate::metrics::Metric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub bins: usize,
    pub boost: BoostConfig,
    pub mlp: MlpConfig,
    pub vector: VectorFitConfig,
    pub image: ImageFeatureConfig,
}

impl ShiftConfig {
    pub fn with_seed(seed: u64) -> Self {
        ShiftConfig {
            bins: DEFAULT_BINS,
            boost: BoostConfig::with_seed(seed),
            mlp: MlpConfig::with_seed(seed),
            vector: VectorFitConfig::default(),
            image: ImageFeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub model_id: String,
    pub calibrator: ScalingCalibrator,
    /// Accuracy of `f_c ∘ f` on the test split.
    pub test_accuracy: f64,
    pub confidence: CalibrationReport,
    pub boost: CalibrationReport,
    pub mlp: CalibrationReport,
    /// Correct/incorrect test images per `f_c` confidence bin.
    pub histogram: Vec<OutcomeBin>,
}

/// Fits `f_c` (vector scaling) on `train_fc`, trains boosted and MLP
/// estimators of the correctness of `f_c ∘ f` on `train_posthoc` and
/// reports all three predictors on `test`.
pub fn dataset_shift_pipeline(corpus: &Corpus, model_id: &str, cfg: &ShiftConfig) -> Result<ShiftReport> {
    if corpus.task != Task::Classification {
        return Err(Error::Config("the shift pipeline needs a classification corpus".into()));
    }
    if !corpus.is_split() {
        return Err(Error::InvalidInput("the shift pipeline needs a split corpus".into()));
    }
    corpus.require_model(model_id)?;
    let fc = corpus.require_split(Split::TrainFc)?;
    let train = corpus.require_split(Split::TrainPosthoc)?;
    let test = corpus.require_split(Split::Test)?;

    let mut logits = Vec::with_capacity(fc.len());
    let mut labels = Vec::with_capacity(fc.len());
    for r in &fc {
        logits.push(r.classification(model_id)?.logits.clone());
        labels.push(
            r.true_class()
                .ok_or_else(|| Error::InvalidInput(format!("image `{}` has no class", r.image_id)))?,
        );
    }
    let calibrator = fit_vector(&logits, &labels, cfg.vector)?;

    let spec = |kind: EstimatorKind| TrainSpec {
        pipeline: PipelineSpec {
            metric: Metric::Accuracy,
            profile: Profile::Full,
            image: cfg.image.clone(),
            calibrator: Some(calibrator.clone()),
            ..PipelineSpec::default()
        },
        estimator: kind,
        boost: cfg.boost.clone(),
        mlp: cfg.mlp.clone(),
        vector: cfg.vector,
    };
    let report = |m: &PosthocModel, test: &[&ImageRecord]| -> Result<CalibrationReport> {
        CalibrationReport::compute(&m.predict(test)?, &m.truth(test)?, cfg.bins)
    };
    let confidence = PosthocModel::train(
        &train,
        corpus.task,
        model_id,
        corpus.num_classes,
        &spec(EstimatorKind::Confidence),
    )?;
    let boost = PosthocModel::train(
        &train,
        corpus.task,
        model_id,
        corpus.num_classes,
        &spec(EstimatorKind::Boost),
    )?;
    let mlp = PosthocModel::train(
        &train,
        corpus.task,
        model_id,
        corpus.num_classes,
        &spec(EstimatorKind::Mlp),
    )?;

    let truth = confidence.truth(&test)?;
    let conf = confidence.predict(&test)?;
    let correct: Vec<bool> = truth.iter().map(|t| *t == 1.0).collect();
    Ok(ShiftReport {
        model_id: model_id.to_string(),
        test_accuracy: truth.iter().sum::<f64>() / truth.len() as f64,
        histogram: outcome_histogram(&conf, &correct, cfg.bins)?,
        confidence: report(&confidence, &test)?,
        boost: report(&boost, &test)?,
        mlp: report(&mlp, &test)?,
        calibrator,
    })
}
