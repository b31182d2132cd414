//! Ground-truth performance metrics per image.

use serde::{Deserialize, Serialize};

use crate::data::{BBox, ClassificationOutput, GroundTruthObject, ImageRecord, ModelOutput, PredictedObject};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Per-example performance metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Precision,
    Recall,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Accuracy => "accuracy",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(Metric::F1),
            "precision" => Ok(Metric::Precision),
            "recall" => Ok(Metric::Recall),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred_index: usize,
    pub gt_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    /// False positives, ascending.
    pub unmatched_preds: Vec<usize>,
    /// False negatives, ascending.
    pub unmatched_gts: Vec<usize>,
}

/// Greedy matching by descending class confidence.
///
/// Each prediction, in order of confidence (ties by index), takes the
/// still-unmatched ground truth of the same class with the highest IoU at or
/// above `iou_threshold`; IoU ties go to the lower ground-truth index.
pub fn match_objects(preds: &[PredictedObject], gts: &[GroundTruthObject], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .class_confidence
            .total_cmp(&preds[a].class_confidence)
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; gts.len()];
    let mut pred_matched = vec![false; preds.len()];
    let mut matches = Vec::new();
    for pi in order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] || g.class_id != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            gt_taken[gi] = true;
            pred_matched[pi] = true;
            matches.push(Match {
                pred_index: pi,
                gt_index: gi,
                iou: v,
            });
        }
    }
    MatchResult {
        matches,
        unmatched_preds: (0..preds.len()).filter(|i| !pred_matched[*i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|i| !gt_taken[*i]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ImageMetrics {
    /// Metrics from raw counts. An image with neither predictions nor ground
    /// truth scores 1 everywhere; an empty denominator otherwise gives 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return ImageMetrics {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                tp,
                fp,
                fn_,
            };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ImageMetrics {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    pub fn get(&self, metric: Metric) -> Result<f64> {
        match metric {
            Metric::F1 => Ok(self.f1),
            Metric::Precision => Ok(self.precision),
            Metric::Recall => Ok(self.recall),
            Metric::Accuracy => Err(Error::Config(
                "accuracy is a classification metric; use f1, precision or recall for detection".into(),
            )),
        }
    }
}

pub fn image_metrics(mr: &MatchResult) -> ImageMetrics {
    ImageMetrics::from_counts(mr.matches.len(), mr.unmatched_preds.len(), mr.unmatched_gts.len())
}

/// Fraction of outputs whose predicted class equals the true class.
pub fn accuracy(outputs: &[ClassificationOutput]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty list".into()));
    }
    let correct = outputs.iter().filter(|o| o.is_correct()).count();
    Ok(correct as f64 / outputs.len() as f64)
}

/// Class confidence times objectness when the model reports objectness.
pub fn combined_confidence(p: &PredictedObject) -> f64 {
    match p.objectness {
        Some(o) => p.class_confidence * o,
        None => p.class_confidence,
    }
}

/// The metric `m(y, f(x))` of one model on one record.
pub fn record_metric(rec: &ImageRecord, model_id: &str, metric: Metric, iou_threshold: f64) -> Result<f64> {
    match rec.output(model_id)? {
        ModelOutput::Detections(dets) => {
            image_metrics(&match_objects(dets, rec.gt_objects(), iou_threshold)).get(metric)
        }
        ModelOutput::Classification(c) => match metric {
            Metric::Accuracy => Ok(if c.is_correct() { 1.0 } else { 0.0 }),
            other => Err(Error::Config(format!(
                "metric `{other}` is not defined for classification outputs; use accuracy"
            ))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(a: [f64; 4]) -> BBox {
        BBox::from_array(a)
    }

    fn pred(b: [f64; 4], class_id: u32, conf: f64) -> PredictedObject {
        PredictedObject {
            bbox: bb(b),
            class_id,
            class_confidence: conf,
            objectness: None,
        }
    }

    fn gt(b: [f64; 4], class_id: u32) -> GroundTruthObject {
        GroundTruthObject { bbox: bb(b), class_id }
    }

    #[test]
    fn iou_examples() {
        let a = bb([0.1, 0.1, 0.4, 0.5]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb([0.5, 0.5, 0.9, 0.9])), 0.0);
        // Intersection 0.1·0.2 = 0.02, union 0.04 + 0.04 − 0.02 = 0.06.
        let v = iou(&bb([0.0, 0.0, 0.2, 0.2]), &bb([0.1, 0.0, 0.3, 0.2]));
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn iou_degenerate_boxes() {
        let point = bb([0.3, 0.3, 0.3, 0.3]);
        assert_eq!(iou(&point, &point), 0.0);
        assert_eq!(iou(&point, &bb([0.0, 0.0, 1.0, 1.0])), 0.0);
    }

    #[test]
    fn single_exact_match() {
        let mr = match_objects(
            &[pred([0.1, 0.1, 0.3, 0.3], 1, 0.9)],
            &[gt([0.1, 0.1, 0.3, 0.3], 1)],
            0.5,
        );
        assert_eq!(mr.matches.len(), 1);
        assert!(mr.unmatched_preds.is_empty() && mr.unmatched_gts.is_empty());
    }

    #[test]
    fn class_must_agree() {
        let mr = match_objects(
            &[pred([0.1, 0.1, 0.3, 0.3], 1, 0.9)],
            &[gt([0.1, 0.1, 0.3, 0.3], 2)],
            0.5,
        );
        assert!(mr.matches.is_empty());
        assert_eq!(mr.unmatched_preds, vec![0]);
        assert_eq!(mr.unmatched_gts, vec![0]);
    }

    #[test]
    fn higher_confidence_wins_shared_gt() {
        // Both predictions overlap the single gt at IoU 0.9; listing the weaker
        // one first checks that order comes from confidence, not position.
        let g = gt([0.0, 0.0, 0.5, 0.5], 0);
        let shifted = [0.0, 0.0, 0.5, 0.45];
        let mr = match_objects(&[pred(shifted, 0, 0.8), pred(shifted, 0, 0.9)], &[g], 0.5);
        assert_eq!(mr.matches.len(), 1);
        assert_eq!(mr.matches[0].pred_index, 1);
        assert!((mr.matches[0].iou - 0.9).abs() < 1e-12);
        assert_eq!(mr.unmatched_preds, vec![0]);
    }

    #[test]
    fn metric_counts() {
        let m = ImageMetrics::from_counts(2, 1, 1);
        for v in [m.precision, m.recall, m.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        let m = ImageMetrics::from_counts(0, 0, 0);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = ImageMetrics::from_counts(0, 0, 3);
        assert_eq!((m.recall, m.f1), (0.0, 0.0));
        let m = ImageMetrics::from_counts(0, 2, 0);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn accuracy_cases() {
        let out = |p: usize, t: usize| ClassificationOutput {
            logits: vec![0.0; 3],
            predicted_class: p,
            true_class: t,
        };
        assert_eq!(accuracy(&[out(0, 0), out(1, 1)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[out(0, 1), out(1, 2)]).unwrap(), 0.0);
        assert_eq!(accuracy(&[out(0, 0), out(1, 1), out(2, 2), out(0, 2)]).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn combined_confidence_cases() {
        let mut p = pred([0.0, 0.0, 0.1, 0.1], 0, 0.8);
        assert_eq!(combined_confidence(&p), 0.8);
        p.objectness = Some(0.5);
        assert!((combined_confidence(&p) - 0.4).abs() < 1e-15);
        p.class_confidence = 0.0;
        assert_eq!(combined_confidence(&p), 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c, d)| BBox {
            x_min: a.min(c),
            y_min: b.min(d),
            x_max: a.max(c),
            y_max: b.max(d),
        })
    }

    fn arb_pred() -> impl Strategy<Value = PredictedObject> {
        (arb_box(), 0u32..3, 0.0..=1.0f64).prop_map(|(bbox, class_id, c)| PredictedObject {
            bbox,
            class_id,
            class_confidence: c,
            objectness: None,
        })
    }

    fn arb_gt() -> impl Strategy<Value = GroundTruthObject> {
        (arb_box(), 0u32..3).prop_map(|(bbox, class_id)| GroundTruthObject { bbox, class_id })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            if a.area() > 0.0 {
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn match_counts_partition(
            preds in prop::collection::vec(arb_pred(), 0..6),
            gts in prop::collection::vec(arb_gt(), 0..6),
            thr in 0.05..=1.0f64,
        ) {
            let mr = match_objects(&preds, &gts, thr);
            let m = image_metrics(&mr);
            prop_assert_eq!(m.tp + m.fn_, gts.len());
            prop_assert_eq!(m.tp + m.fp, preds.len());
            for mt in &mr.matches {
                prop_assert!(mt.iou >= thr);
                prop_assert_eq!(preds[mt.pred_index].class_id, gts[mt.gt_index].class_id);
            }
            let mut ps: Vec<_> = mr.matches.iter().map(|x| x.pred_index).collect();
            let mut gs: Vec<_> = mr.matches.iter().map(|x| x.gt_index).collect();
            ps.sort(); ps.dedup(); gs.sort(); gs.dedup();
            prop_assert_eq!(ps.len(), mr.matches.len());
            prop_assert_eq!(gs.len(), mr.matches.len());
            if m.precision + m.recall > 0.0 {
                let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
                prop_assert!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12);
            }
        }
    }
}
