//! Choosing the best of several models per input.

use serde::{Deserialize, Serialize};

use super::posthoc::{FeaturePipeline, TrainSpec};
use crate::data::{ImageRecord, Task};
use crate::error::{Error, Result};
use crate::estimators::BoostedClassifier;
use crate::features::FeatureMatrix;
use crate::metrics::Metric;

/// Index of the best metric, lowest index on ties.
pub fn oracle_index(metrics: &[f64]) -> usize {
    let mut best = 0;
    for (i, m) in metrics.iter().enumerate() {
        if *m > metrics[best] {
            best = i;
        }
    }
    best
}

/// Classifier over model indices trained on the features of every candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSelector {
    pub model_ids: Vec<String>,
    pub metric: Metric,
    pub iou_threshold: f64,
    pub pipelines: Vec<FeaturePipeline>,
    pub feature_names: Vec<String>,
    pub classifier: BoostedClassifier,
}

fn check_models(model_ids: &[String]) -> Result<()> {
    if model_ids.len() < 2 {
        return Err(Error::Config("model selection needs at least two models".into()));
    }
    let mut sorted = model_ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != model_ids.len() {
        return Err(Error::Config("model ids must be distinct".into()));
    }
    Ok(())
}

/// True metric of every model on every record.
pub fn model_metrics(
    pipelines: &[FeaturePipeline],
    records: &[&ImageRecord],
    metric: Metric,
    iou: f64,
) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| pipelines.iter().map(|p| p.target(r, metric, iou)).collect())
        .collect()
}

fn concat_row(pipelines: &[FeaturePipeline], rec: &ImageRecord) -> Result<Vec<f64>> {
    let mut row = Vec::new();
    for p in pipelines {
        row.extend(p.row(rec)?);
    }
    Ok(row)
}

impl ModelSelector {
    pub fn train(
        train: &[&ImageRecord],
        task: Task,
        model_ids: &[String],
        num_classes: usize,
        spec: &TrainSpec,
    ) -> Result<Self> {
        check_models(model_ids)?;
        if train.is_empty() {
            return Err(Error::InvalidInput("no training records".into()));
        }
        let p = &spec.pipeline;
        let pipelines = model_ids
            .iter()
            .map(|m| FeaturePipeline::fit(train, task, m, num_classes, p))
            .collect::<Result<Vec<_>>>()?;
        let mut feature_names = Vec::new();
        for (id, pl) in model_ids.iter().zip(&pipelines) {
            feature_names.extend(pl.names()?.into_iter().map(|n| format!("{id}.{n}")));
        }
        let labels: Vec<usize> = model_metrics(&pipelines, train, p.metric, p.iou_threshold)?
            .iter()
            .map(|m| oracle_index(m))
            .collect();
        let rows = train
            .iter()
            .map(|r| concat_row(&pipelines, r))
            .collect::<Result<Vec<_>>>()?;
        let x = FeatureMatrix::from_rows(feature_names.clone(), rows)?;
        let classifier = BoostedClassifier::train(&x, &labels, model_ids.len(), &spec.boost)?;
        Ok(ModelSelector {
            model_ids: model_ids.to_vec(),
            metric: p.metric,
            iou_threshold: p.iou_threshold,
            pipelines,
            feature_names,
            classifier,
        })
    }

    pub fn row(&self, rec: &ImageRecord) -> Result<Vec<f64>> {
        concat_row(&self.pipelines, rec)
    }

    pub fn matrix(&self, records: &[&ImageRecord]) -> Result<FeatureMatrix> {
        let rows = records.iter().map(|r| self.row(r)).collect::<Result<Vec<_>>>()?;
        FeatureMatrix::from_rows(self.feature_names.clone(), rows)
    }

    pub fn choose(&self, rec: &ImageRecord) -> Result<usize> {
        Ok(self.classifier.predict_row(&self.row(rec)?))
    }

    pub fn evaluate(&self, records: &[&ImageRecord]) -> Result<SelectionResult> {
        let metrics = model_metrics(&self.pipelines, records, self.metric, self.iou_threshold)?;
        let chosen = records.iter().map(|r| self.choose(r)).collect::<Result<Vec<_>>>()?;
        let ids = records.iter().map(|r| r.image_id.clone()).collect();
        summarize(&self.model_ids, ids, metrics, chosen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub image_id: String,
    pub chosen: usize,
    pub oracle: usize,
    pub metrics: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub model_ids: Vec<String>,
    pub rows: Vec<SelectionRow>,
    pub model_means: Vec<f64>,
    pub combined_mean: f64,
    pub oracle_mean: f64,
    /// Images assigned to each model by the selector.
    pub histogram: Vec<usize>,
    pub oracle_histogram: Vec<usize>,
    /// Fraction of images where the chosen model attains the best metric.
    pub accuracy: f64,
}

impl SelectionResult {
    pub fn best_individual_mean(&self) -> f64 {
        self.model_means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Aggregates per-image choices against the true per-model metrics.
pub fn summarize(
    model_ids: &[String],
    image_ids: Vec<String>,
    metrics: Vec<Vec<f64>>,
    chosen: Vec<usize>,
) -> Result<SelectionResult> {
    let k = model_ids.len();
    let n = metrics.len();
    if n == 0 {
        return Err(Error::InvalidInput("no images to evaluate selection on".into()));
    }
    if image_ids.len() != n
        || chosen.len() != n
        || metrics.iter().any(|m| m.len() != k)
        || chosen.iter().any(|c| *c >= k)
    {
        return Err(Error::InvalidInput("selection inputs disagree in size".into()));
    }
    let nf = n as f64;
    let model_means = (0..k).map(|j| metrics.iter().map(|m| m[j]).sum::<f64>() / nf).collect();
    let mut histogram = vec![0; k];
    let mut oracle_histogram = vec![0; k];
    let mut combined = 0.0;
    let mut oracle = 0.0;
    let mut hits = 0;
    let mut rows = Vec::with_capacity(n);
    for ((id, m), c) in image_ids.into_iter().zip(metrics).zip(chosen) {
        let o = oracle_index(&m);
        histogram[c] += 1;
        oracle_histogram[o] += 1;
        combined += m[c];
        oracle += m[o];
        if m[c] == m[o] {
            hits += 1;
        }
        rows.push(SelectionRow {
            image_id: id,
            chosen: c,
            oracle: o,
            metrics: m,
        });
    }
    Ok(SelectionResult {
        model_ids: model_ids.to_vec(),
        rows,
        model_means,
        combined_mean: combined / nf,
        oracle_mean: oracle / nf,
        histogram,
        oracle_histogram,
        accuracy: hits as f64 / nf,
    })
}
