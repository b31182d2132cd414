//! Temperature scaling of detection confidences.

use serde::{Deserialize, Serialize};

use super::scaling::{golden_section, T_MAX, T_MIN};
use crate::data::{GroundTruthObject, PredictedObject};
use crate::error::{Error, Result};
use crate::metrics::{combined_confidence, match_objects};

const EPS: f64 = 1e-6;

fn logit(c: f64) -> f64 {
    let c = c.clamp(EPS, 1.0 - EPS);
    (c / (1.0 - c)).ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Calibrated confidence `σ(logit(c) / T)`, fitted on matched (1) versus
/// unmatched (0) detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionCalibrator {
    pub temperature: f64,
}

impl DetectionCalibrator {
    /// Fits `T` on `(confidence, correct)` pairs.
    pub fn fit_labeled(samples: &[(f64, bool)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no detections to calibrate on".into()));
        }
        let z: Vec<(f64, bool)> = samples.iter().map(|(c, y)| (logit(*c), *y)).collect();
        let nll = |t: f64| {
            z.iter()
                .map(|(v, y)| {
                    let p = sigmoid(v / t).clamp(1e-15, 1.0 - 1e-15);
                    if *y {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum::<f64>()
        };
        let u = golden_section(T_MIN.ln(), T_MAX.ln(), 1e-4, |u| nll(u.exp()));
        Ok(DetectionCalibrator { temperature: u.exp() })
    }

    /// Fits on every detection of the given images, labelled by matching.
    pub fn fit(images: &[(&[PredictedObject], &[GroundTruthObject])], iou_threshold: f64) -> Result<Self> {
        let mut samples = Vec::new();
        for (dets, gts) in images {
            let mr = match_objects(dets, gts, iou_threshold);
            let mut correct = vec![false; dets.len()];
            for m in &mr.matches {
                correct[m.pred_index] = true;
            }
            samples.extend(dets.iter().zip(correct).map(|(d, ok)| (combined_confidence(d), ok)));
        }
        Self::fit_labeled(&samples)
    }

    pub fn calibrate(&self, confidence: f64) -> f64 {
        sigmoid(logit(confidence) / self.temperature)
    }

    /// Mean calibrated confidence of an image's detections; 0 without detections.
    pub fn image_score(&self, dets: &[PredictedObject]) -> f64 {
        if dets.is_empty() {
            return 0.0;
        }
        dets.iter().map(|d| self.calibrate(combined_confidence(d))).sum::<f64>() / dets.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::ModelFile(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct_pushes_confidence_up() {
        let cal = DetectionCalibrator::fit_labeled(&[(0.9, true); 20]).unwrap();
        assert!(cal.calibrate(0.9) >= 0.9);
    }

    #[test]
    fn half_is_a_fixed_point() {
        for t in [0.1, 1.0, 7.0] {
            let cal = DetectionCalibrator { temperature: t };
            assert!((cal.calibrate(0.5) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn no_detections_scores_zero() {
        assert_eq!(DetectionCalibrator { temperature: 1.0 }.image_score(&[]), 0.0);
        assert!(DetectionCalibrator::fit_labeled(&[]).is_err());
    }

    #[test]
    fn overconfident_detections_get_softened() {
        // Confidence 0.95 but right only 60% of the time.
        let mut s = vec![(0.95, true); 60];
        s.extend(vec![(0.95, false); 40]);
        s.extend(vec![(0.05, false); 60]);
        s.extend(vec![(0.05, true); 40]);
        let cal = DetectionCalibrator::fit_labeled(&s).unwrap();
        assert!(cal.temperature > 1.0);
        assert!((cal.calibrate(0.95) - 0.6).abs() < 0.01, "{}", cal.calibrate(0.95));
    }
}
