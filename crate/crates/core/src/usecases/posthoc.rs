//! Per-example performance estimation: feature pipeline, training and the
//! self-describing model file.

use serde::{Deserialize, Serialize};

use crate::data::{argmax, ImageRecord, Task};
use crate::error::{Error, Result};
use crate::estimators::{
    fit_temperature, fit_vector, BoostConfig, BoostedEnsemble, DetectionCalibrator, EstimatorKind, Mlp, MlpConfig,
    ScalingCalibrator, VectorFitConfig,
};
use crate::features::scores::DEFAULT_RIDGE;
use crate::features::{
    assemble, classification_feature_names, classification_features, extra_feature_names, softmax, FeatureMatrix,
    ImageFeatureConfig, Profile, ScoreModels,
};
use crate::metrics::{combined_confidence, record_metric, Metric, DEFAULT_IOU_THRESHOLD};

/// Turns one model's output on one record into a feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum FeaturePipeline {
    Detection {
        model_id: String,
        profile: Profile,
        scores: Option<ScoreModels>,
        image: ImageFeatureConfig,
    },
    Classification {
        model_id: String,
        num_classes: usize,
        /// Extra precomputed image features, in column order.
        extra: Vec<String>,
        /// Applied to the logits before anything else (`f_c ∘ f`).
        calibrator: Option<ScalingCalibrator>,
        image: ImageFeatureConfig,
    },
}

impl FeaturePipeline {
    /// Builds a pipeline for `model_id`, fitting class/location score models
    /// on `train` when the profile needs them.
    pub fn fit(
        train: &[&ImageRecord],
        task: Task,
        model_id: &str,
        num_classes: usize,
        spec: &PipelineSpec,
    ) -> Result<Self> {
        match task {
            Task::Detection => {
                let scores = if spec.profile.needs_scores()? {
                    let mut pairs = Vec::with_capacity(train.len());
                    for r in train {
                        let m = record_metric(r, model_id, spec.metric, spec.iou_threshold)?;
                        pairs.push((r.detections(model_id)?, m));
                    }
                    Some(ScoreModels::fit(&pairs, num_classes, spec.ridge)?)
                } else {
                    None
                };
                Ok(FeaturePipeline::Detection {
                    model_id: model_id.to_string(),
                    profile: spec.profile.clone(),
                    scores,
                    image: spec.image.clone(),
                })
            }
            Task::Classification => Ok(FeaturePipeline::Classification {
                model_id: model_id.to_string(),
                num_classes,
                extra: extra_feature_names(train.iter().copied()),
                calibrator: spec.calibrator.clone(),
                image: spec.image.clone(),
            }),
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            FeaturePipeline::Detection { model_id, .. } | FeaturePipeline::Classification { model_id, .. } => model_id,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            FeaturePipeline::Detection { .. } => Task::Detection,
            FeaturePipeline::Classification { .. } => Task::Classification,
        }
    }

    pub fn names(&self) -> Result<Vec<String>> {
        match self {
            FeaturePipeline::Detection { profile, .. } => profile.active_names(),
            FeaturePipeline::Classification { num_classes, extra, .. } => {
                Ok(classification_feature_names(*num_classes, extra))
            }
        }
    }

    /// Logits after the optional calibrator.
    pub fn logits(&self, rec: &ImageRecord) -> Result<Vec<f64>> {
        let FeaturePipeline::Classification {
            model_id,
            num_classes,
            calibrator,
            ..
        } = self
        else {
            return Err(Error::Config("logits requested from a detection pipeline".into()));
        };
        let out = rec.classification(model_id)?;
        if out.logits.len() != *num_classes {
            return Err(Error::InvalidInput(format!(
                "image `{}` has {} logits, expected {num_classes}",
                rec.image_id,
                out.logits.len()
            )));
        }
        Ok(match calibrator {
            Some(c) => c.apply(&out.logits),
            None => out.logits.clone(),
        })
    }

    pub fn row(&self, rec: &ImageRecord) -> Result<Vec<f64>> {
        match self {
            FeaturePipeline::Detection {
                model_id,
                profile,
                scores,
                image,
            } => Ok(assemble(rec, model_id, profile, scores.as_ref(), image)?.active()),
            FeaturePipeline::Classification { extra, image, .. } => {
                classification_features(&self.logits(rec)?, rec, extra, image)
            }
        }
    }

    pub fn matrix(&self, records: &[&ImageRecord]) -> Result<FeatureMatrix> {
        let mut m = FeatureMatrix::new(self.names()?);
        for r in records {
            m.push(self.row(r)?)?;
        }
        m.check()?;
        Ok(m)
    }

    /// True metric of the pipeline's model on `rec`. For classification this
    /// is the correctness of the (calibrated) argmax.
    pub fn target(&self, rec: &ImageRecord, metric: Metric, iou_threshold: f64) -> Result<f64> {
        match self {
            FeaturePipeline::Detection { model_id, .. } => record_metric(rec, model_id, metric, iou_threshold),
            FeaturePipeline::Classification { .. } => {
                if metric != Metric::Accuracy {
                    return Err(Error::Config(format!(
                        "metric `{metric}` is not defined for classification outputs; use accuracy"
                    )));
                }
                let truth = rec
                    .true_class()
                    .ok_or_else(|| Error::InvalidInput(format!("image `{}` has no true class", rec.image_id)))?;
                Ok((argmax(&self.logits(rec)?) == truth) as u8 as f64)
            }
        }
    }

    pub fn targets(&self, records: &[&ImageRecord], metric: Metric, iou_threshold: f64) -> Result<Vec<f64>> {
        records.iter().map(|r| self.target(r, metric, iou_threshold)).collect()
    }

    /// Uncalibrated confidence: mean combined detection confidence (0 without
    /// detections) or the maximum softmax probability.
    pub fn confidence(&self, rec: &ImageRecord) -> Result<f64> {
        match self {
            FeaturePipeline::Detection { model_id, .. } => {
                let dets = rec.detections(model_id)?;
                if dets.is_empty() {
                    return Ok(0.0);
                }
                Ok(dets.iter().map(combined_confidence).sum::<f64>() / dets.len() as f64)
            }
            FeaturePipeline::Classification { .. } => {
                let p = softmax(&self.logits(rec)?);
                Ok(p.iter().copied().fold(0.0, f64::max))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeaturePipeline::Detection { profile, scores, .. } => {
                profile.mask()?;
                if profile.needs_scores()? && scores.is_none() {
                    return Err(Error::ModelFile(format!(
                        "profile `{}` needs score models but the file has none",
                        profile.name()
                    )));
                }
                if let Some(s) = scores {
                    s.validate()?;
                }
            }
            FeaturePipeline::Classification {
                num_classes,
                calibrator,
                ..
            } => {
                if *num_classes == 0 {
                    return Err(Error::ModelFile("classification pipeline with zero classes".into()));
                }
                if let Some(c) = calibrator {
                    c.validate(Some(*num_classes))?;
                }
            }
        }
        Ok(())
    }
}

/// How features are built and targets computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub metric: Metric,
    pub profile: Profile,
    pub iou_threshold: f64,
    pub ridge: f64,
    pub image: ImageFeatureConfig,
    /// Logit calibrator applied before feature extraction (classification).
    pub calibrator: Option<ScalingCalibrator>,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            metric: Metric::F1,
            profile: Profile::Full,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            ridge: DEFAULT_RIDGE,
            image: ImageFeatureConfig::default(),
            calibrator: None,
        }
    }
}

/// Everything needed to train a [`PosthocModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub pipeline: PipelineSpec,
    pub estimator: EstimatorKind,
    pub boost: BoostConfig,
    pub mlp: MlpConfig,
    pub vector: VectorFitConfig,
}

impl TrainSpec {
    pub fn new(metric: Metric, profile: Profile, estimator: EstimatorKind, seed: u64) -> Self {
        TrainSpec {
            pipeline: PipelineSpec {
                metric,
                profile,
                ..PipelineSpec::default()
            },
            estimator,
            boost: BoostConfig::with_seed(seed),
            mlp: MlpConfig::with_seed(seed),
            vector: VectorFitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Estimator {
    Boost {
        ensemble: BoostedEnsemble,
    },
    Mlp {
        network: Mlp,
    },
    /// The pipeline's uncalibrated confidence.
    Confidence,
    /// Mean calibrated detection confidence.
    DetectionTemperature {
        calibrator: DetectionCalibrator,
    },
    /// Maximum probability after logit scaling.
    Scaling {
        calibrator: ScalingCalibrator,
    },
}

impl Estimator {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            Estimator::Boost { .. } => EstimatorKind::Boost,
            Estimator::Mlp { .. } => EstimatorKind::Mlp,
            Estimator::Confidence => EstimatorKind::Confidence,
            Estimator::DetectionTemperature { .. } => EstimatorKind::Temp,
            Estimator::Scaling {
                calibrator: ScalingCalibrator::Temperature { .. },
            } => EstimatorKind::Temp,
            Estimator::Scaling { .. } => EstimatorKind::Vector,
        }
    }
}

/// Labelled classification data for fitting logit scaling.
fn logits_and_labels(pipeline: &FeaturePipeline, train: &[&ImageRecord]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut logits = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for r in train {
        logits.push(pipeline.logits(r)?);
        labels.push(
            r.true_class()
                .ok_or_else(|| Error::InvalidInput(format!("image `{}` has no true class", r.image_id)))?,
        );
    }
    Ok((logits, labels))
}

/// Fits the calibrated-confidence baseline of `kind` (`temp` or `vector`).
pub fn fit_confidence_baseline(
    pipeline: &FeaturePipeline,
    train: &[&ImageRecord],
    kind: EstimatorKind,
    iou_threshold: f64,
    vector: VectorFitConfig,
) -> Result<Estimator> {
    match (pipeline, kind) {
        (_, EstimatorKind::Confidence) => Ok(Estimator::Confidence),
        (FeaturePipeline::Detection { model_id, .. }, EstimatorKind::Temp) => {
            let mut images = Vec::with_capacity(train.len());
            for r in train {
                images.push((r.detections(model_id)?, r.gt_objects()));
            }
            Ok(Estimator::DetectionTemperature {
                calibrator: DetectionCalibrator::fit(&images, iou_threshold)?,
            })
        }
        (FeaturePipeline::Classification { .. }, EstimatorKind::Temp) => {
            let (z, y) = logits_and_labels(pipeline, train)?;
            Ok(Estimator::Scaling {
                calibrator: fit_temperature(&z, &y)?,
            })
        }
        (FeaturePipeline::Classification { .. }, EstimatorKind::Vector) => {
            let (z, y) = logits_and_labels(pipeline, train)?;
            Ok(Estimator::Scaling {
                calibrator: fit_vector(&z, &y, vector)?,
            })
        }
        (FeaturePipeline::Detection { .. }, EstimatorKind::Vector) => Err(Error::Config(
            "vector scaling needs classification logits; use temp for detection".into(),
        )),
        (_, k) => Err(Error::Config(format!("`{}` is not a confidence baseline", k.name()))),
    }
}

/// A trained per-example performance estimator together with the feature
/// pipeline it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosthocModel {
    pub version: u32,
    pub num_classes: usize,
    pub metric: Metric,
    pub iou_threshold: f64,
    pub feature_names: Vec<String>,
    pub pipeline: FeaturePipeline,
    pub estimator: Estimator,
}

impl PosthocModel {
    pub const VERSION: u32 = 1;

    /// Trains on `train`. Learned estimators use the pipeline features;
    /// confidence baselines are fitted on the same records.
    pub fn train(
        train: &[&ImageRecord],
        task: Task,
        model_id: &str,
        num_classes: usize,
        spec: &TrainSpec,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidInput("no training records".into()));
        }
        let p = &spec.pipeline;
        if task == Task::Classification && p.metric != Metric::Accuracy {
            return Err(Error::Config(format!(
                "metric `{}` is not defined for classification outputs; use accuracy",
                p.metric
            )));
        }
        if task == Task::Detection && p.metric == Metric::Accuracy {
            return Err(Error::Config(
                "accuracy is a classification metric; use f1, precision or recall".into(),
            ));
        }
        let pipeline = FeaturePipeline::fit(train, task, model_id, num_classes, p)?;
        let feature_names = pipeline.names()?;
        let estimator = match spec.estimator {
            EstimatorKind::Boost | EstimatorKind::Mlp => {
                let x = pipeline.matrix(train)?;
                let y = pipeline.targets(train, p.metric, p.iou_threshold)?;
                if spec.estimator == EstimatorKind::Boost {
                    Estimator::Boost {
                        ensemble: BoostedEnsemble::train(&x, &y, &spec.boost, true)?,
                    }
                } else {
                    Estimator::Mlp {
                        network: Mlp::train(&x, &y, &spec.mlp, true)?,
                    }
                }
            }
            kind => fit_confidence_baseline(&pipeline, train, kind, p.iou_threshold, spec.vector)?,
        };
        Ok(PosthocModel {
            version: Self::VERSION,
            num_classes,
            metric: p.metric,
            iou_threshold: p.iou_threshold,
            feature_names,
            pipeline,
            estimator,
        })
    }

    pub fn model_id(&self) -> &str {
        self.pipeline.model_id()
    }

    pub fn predict_record(&self, rec: &ImageRecord) -> Result<f64> {
        match &self.estimator {
            Estimator::Boost { ensemble } => Ok(ensemble.predict_row(&self.pipeline.row(rec)?)),
            Estimator::Mlp { network } => Ok(network.predict_row(&self.pipeline.row(rec)?)),
            Estimator::Confidence => self.pipeline.confidence(rec),
            Estimator::DetectionTemperature { calibrator } => {
                Ok(calibrator.image_score(rec.detections(self.pipeline.model_id())?))
            }
            Estimator::Scaling { calibrator } => {
                let p = calibrator.probabilities(&self.pipeline.logits(rec)?);
                Ok(p.iter().copied().fold(0.0, f64::max))
            }
        }
    }

    pub fn predict(&self, records: &[&ImageRecord]) -> Result<Vec<f64>> {
        records.iter().map(|r| self.predict_record(r)).collect()
    }

    /// True metric of the estimated model on each record.
    pub fn truth(&self, records: &[&ImageRecord]) -> Result<Vec<f64>> {
        self.pipeline.targets(records, self.metric, self.iou_threshold)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != Self::VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported model file version {} (expected {})",
                self.version,
                Self::VERSION
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::ModelFile(format!(
                "IoU threshold {} outside (0,1]",
                self.iou_threshold
            )));
        }
        self.pipeline.validate()?;
        let names = self.pipeline.names().map_err(|e| Error::ModelFile(e.to_string()))?;
        if names != self.feature_names {
            return Err(Error::ModelFile("feature names disagree with the pipeline".into()));
        }
        match &self.estimator {
            Estimator::Boost { ensemble } => {
                ensemble.validate()?;
                if ensemble.feature_names != names {
                    return Err(Error::ProfileMismatch {
                        expected: ensemble.feature_names.clone(),
                        actual: names,
                    });
                }
            }
            Estimator::Mlp { network } => {
                network.validate()?;
                if network.feature_names != names {
                    return Err(Error::ProfileMismatch {
                        expected: network.feature_names.clone(),
                        actual: names,
                    });
                }
            }
            Estimator::Confidence => {}
            Estimator::DetectionTemperature { calibrator } => {
                if self.pipeline.task() != Task::Detection {
                    return Err(Error::ModelFile(
                        "detection calibrator on a classification model".into(),
                    ));
                }
                calibrator.validate()?;
            }
            Estimator::Scaling { calibrator } => {
                if self.pipeline.task() != Task::Classification {
                    return Err(Error::ModelFile("logit scaling on a detection model".into()));
                }
                calibrator.validate(Some(self.num_classes))?;
            }
        }
        Ok(())
    }

    /// Parses and validates a model file.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: PosthocModel = serde_json::from_str(s).map_err(|e| Error::ModelFile(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}
