//! Device/server offloading driven by predicted performance gaps.

use serde::{Deserialize, Serialize};

use super::posthoc::{fit_confidence_baseline, Estimator, FeaturePipeline, TrainSpec};
use crate::data::{ImageRecord, Task};
use crate::error::{Error, Result};
use crate::estimators::{BoostedClassifier, BoostedEnsemble, EstimatorKind};
use crate::features::softmax;
use crate::metrics::{record_metric, Metric};

/// Truth side of offloading for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadRow {
    pub image_id: String,
    pub client_metric: f64,
    pub server_metrics: Vec<f64>,
    /// `max_k m(f_k) − m(f₀)` over the servers; may be negative.
    pub true_gap: f64,
    /// Server achieving the maximum, lowest index on ties.
    pub best_server: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadScoreSet {
    pub client: String,
    pub servers: Vec<String>,
    pub rows: Vec<OffloadRow>,
}

impl OffloadScoreSet {
    pub fn gaps(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.true_gap).collect()
    }

    pub fn client_mean(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.client_metric))
    }
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    v.sum::<f64>() / n as f64
}

fn check_servers(client: &str, servers: &[String]) -> Result<()> {
    if servers.is_empty() {
        return Err(Error::Config("offloading needs at least one server model".into()));
    }
    if servers.iter().any(|s| s == client) {
        log::warn!("server list contains the client model `{client}`");
    }
    Ok(())
}

/// Exact per-image gaps between the best server and the client.
pub fn offload_scores(
    records: &[&ImageRecord],
    client: &str,
    servers: &[String],
    metric: Metric,
    iou_threshold: f64,
) -> Result<OffloadScoreSet> {
    check_servers(client, servers)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let client_metric = record_metric(r, client, metric, iou_threshold)?;
        let server_metrics = servers
            .iter()
            .map(|s| record_metric(r, s, metric, iou_threshold))
            .collect::<Result<Vec<f64>>>()?;
        let best_server = first_max(&server_metrics);
        rows.push(OffloadRow {
            image_id: r.image_id.clone(),
            client_metric,
            true_gap: server_metrics[best_server] - client_metric,
            server_metrics,
            best_server,
        });
    }
    Ok(OffloadScoreSet {
        client: client.to_string(),
        servers: servers.to_vec(),
        rows,
    })
}

fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The ⌈ρ·n⌉-th largest of `gaps`; `+∞` for ρ = 0.
pub fn threshold_for_fraction(gaps: &[f64], rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("offload fraction {rho} outside [0,1]")));
    }
    if gaps.is_empty() {
        return Err(Error::InvalidInput("no gaps to set a threshold from".into()));
    }
    if gaps.iter().any(|g| g.is_nan()) {
        return Err(Error::InvalidInput("gap is NaN".into()));
    }
    let k = ((rho * gaps.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = gaps.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[k.min(sorted.len()) - 1])
}

/// Offload iff the predicted gap is at least `max(threshold, 0)`, or at
/// least `threshold` with the guard disabled.
pub fn offload_policy(predicted_gaps: &[f64], threshold: f64, guard: bool) -> Vec<bool> {
    let t = if guard { threshold.max(0.0) } else { threshold };
    predicted_gaps.iter().map(|g| *g >= t).collect()
}

/// Offloads the `budget` least confident images (ties to the lower index).
pub fn confidence_policy(confidence: &[f64], budget: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..confidence.len()).collect();
    idx.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
    let mut out = vec![false; confidence.len()];
    for &i in idx.iter().take(budget) {
        out[i] = true;
    }
    out
}

/// Offloads up to `budget` images with the largest nonnegative true gap.
pub fn oracle_policy(true_gaps: &[f64], budget: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..true_gaps.len()).filter(|&i| true_gaps[i] >= 0.0).collect();
    idx.sort_by(|&a, &b| true_gaps[b].total_cmp(&true_gaps[a]).then(a.cmp(&b)));
    let mut out = vec![false; true_gaps.len()];
    for &i in idx.iter().take(budget) {
        out[i] = true;
    }
    out
}

/// Mean metric when offloaded images are served by `server[i]`.
pub fn served_mean(scores: &OffloadScoreSet, offloaded: &[bool], server: &[usize]) -> f64 {
    mean(scores.rows.iter().enumerate().map(|(i, r)| {
        if offloaded[i] {
            r.server_metrics[server[i]]
        } else {
            r.client_metric
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rho: f64,
    /// Threshold from the validation gaps, before the nonnegativity guard.
    pub threshold: f64,
    /// Fraction of the evaluation images the policy offloads.
    pub fraction: f64,
    pub mean_policy: f64,
    pub mean_confidence: f64,
    pub mean_oracle: f64,
}

/// Predicted quantities of one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct OffloadPredictions {
    pub gaps: Vec<f64>,
    pub confidence: Vec<f64>,
    /// Server index chosen for each image if offloaded.
    pub server: Vec<usize>,
}

/// Evaluates the three policies at each ρ. The confidence baseline and the
/// oracle offload as many images as the learned policy does.
pub fn sweep(
    validation_gaps: &[f64],
    test: &OffloadScoreSet,
    pred: &OffloadPredictions,
    rhos: &[f64],
    guard: bool,
) -> Result<Vec<SweepPoint>> {
    let n = test.rows.len();
    if n == 0 {
        return Err(Error::InvalidInput("no evaluation images".into()));
    }
    if pred.gaps.len() != n || pred.confidence.len() != n || pred.server.len() != n {
        return Err(Error::InvalidInput(
            "predictions do not cover the evaluation set".into(),
        ));
    }
    let true_gaps = test.gaps();
    let best: Vec<usize> = test.rows.iter().map(|r| r.best_server).collect();
    let mut out = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let threshold = threshold_for_fraction(validation_gaps, rho)?;
        let policy = offload_policy(&pred.gaps, threshold, guard);
        let m = policy.iter().filter(|b| **b).count();
        let baseline = confidence_policy(&pred.confidence, m);
        let oracle = oracle_policy(&true_gaps, m);
        out.push(SweepPoint {
            rho,
            threshold,
            fraction: m as f64 / n as f64,
            mean_policy: served_mean(test, &policy, &pred.server),
            mean_confidence: served_mean(test, &baseline, &pred.server),
            mean_oracle: served_mean(test, &oracle, &best),
        });
    }
    Ok(out)
}

/// Gap regressor on client features, plus a server selector when there is
/// more than one server and the calibrated client confidence for the
/// baseline policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadPredictor {
    pub client: String,
    pub servers: Vec<String>,
    pub metric: Metric,
    pub iou_threshold: f64,
    pub pipeline: FeaturePipeline,
    pub gap: BoostedEnsemble,
    pub selector: Option<BoostedClassifier>,
    pub baseline: Estimator,
}

impl OffloadPredictor {
    /// Trains the gap regressor (and selector) on `train` and fits the
    /// confidence calibrator on `calibration`.
    pub fn train(
        train: &[&ImageRecord],
        calibration: &[&ImageRecord],
        task: Task,
        client: &str,
        servers: &[String],
        num_classes: usize,
        spec: &TrainSpec,
    ) -> Result<Self> {
        let p = &spec.pipeline;
        let truth = offload_scores(train, client, servers, p.metric, p.iou_threshold)?;
        let pipeline = FeaturePipeline::fit(train, task, client, num_classes, p)?;
        let x = pipeline.matrix(train)?;
        let gap = BoostedEnsemble::train(&x, &truth.gaps(), &spec.boost, false)?;
        let selector = if servers.len() > 1 {
            let labels: Vec<usize> = truth.rows.iter().map(|r| r.best_server).collect();
            Some(BoostedClassifier::train(&x, &labels, servers.len(), &spec.boost)?)
        } else {
            None
        };
        let baseline = if calibration.is_empty() {
            log::warn!("no calibration records; the baseline uses raw client confidence");
            Estimator::Confidence
        } else {
            fit_confidence_baseline(
                &pipeline,
                calibration,
                EstimatorKind::Temp,
                p.iou_threshold,
                spec.vector,
            )?
        };
        Ok(OffloadPredictor {
            client: client.to_string(),
            servers: servers.to_vec(),
            metric: p.metric,
            iou_threshold: p.iou_threshold,
            pipeline,
            gap,
            selector,
            baseline,
        })
    }

    pub fn predict_gap(&self, rec: &ImageRecord) -> Result<f64> {
        Ok(self.gap.predict_row(&self.pipeline.row(rec)?))
    }

    pub fn choose_server(&self, rec: &ImageRecord) -> Result<usize> {
        match &self.selector {
            Some(s) => Ok(s.predict_row(&self.pipeline.row(rec)?)),
            None => Ok(0),
        }
    }

    /// Calibrated client confidence.
    pub fn confidence(&self, rec: &ImageRecord) -> Result<f64> {
        match &self.baseline {
            Estimator::DetectionTemperature { calibrator } => Ok(calibrator.image_score(rec.detections(&self.client)?)),
            Estimator::Scaling { calibrator } => {
                let p = softmax(&calibrator.apply(&self.pipeline.logits(rec)?));
                Ok(p.iter().copied().fold(0.0, f64::max))
            }
            _ => self.pipeline.confidence(rec),
        }
    }

    pub fn predict(&self, records: &[&ImageRecord]) -> Result<OffloadPredictions> {
        let mut out = OffloadPredictions {
            gaps: Vec::with_capacity(records.len()),
            confidence: Vec::with_capacity(records.len()),
            server: Vec::with_capacity(records.len()),
        };
        for r in records {
            out.gaps.push(self.predict_gap(r)?);
            out.confidence.push(self.confidence(r)?);
            out.server.push(self.choose_server(r)?);
        }
        Ok(out)
    }

    /// Sets thresholds from predicted gaps on `validation` and evaluates the
    /// policies on `test`.
    pub fn sweep(
        &self,
        validation: &[&ImageRecord],
        test: &[&ImageRecord],
        rhos: &[f64],
        guard: bool,
    ) -> Result<Vec<SweepPoint>> {
        let val_gaps = validation
            .iter()
            .map(|r| self.predict_gap(r))
            .collect::<Result<Vec<f64>>>()?;
        let truth = offload_scores(test, &self.client, &self.servers, self.metric, self.iou_threshold)?;
        let pred = self.predict(test)?;
        sweep(&val_gaps, &truth, &pred, rhos, guard)
    }
}
