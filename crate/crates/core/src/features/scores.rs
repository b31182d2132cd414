//! Class and location score models.
//!
//! Both are ridge regressions of the true per-image metric on a count vector
//! built from the model's predicted objects: objects per class for the class
//! score, box centres per cell of a 5×5 grid for the location score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::PredictedObject;
use crate::error::{Error, Result};

pub const GRID: usize = 5;
pub const GRID_CELLS: usize = GRID * GRID;
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Linear model `intercept + weights · counts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScore {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearScore {
    pub fn predict(&self, counts: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(counts).map(|(w, c)| w * c).sum::<f64>()
    }

    pub(crate) fn validate(&self, expected_len: usize, what: &str) -> Result<()> {
        if self.weights.len() != expected_len {
            return Err(Error::ModelFile(format!(
                "{what} has {} weights, expected {expected_len}",
                self.weights.len()
            )));
        }
        if !self.intercept.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::ModelFile(format!("{what} has non-finite weights")));
        }
        Ok(())
    }
}

pub type ClassScoreModel = LinearScore;
pub type LocationScoreModel = LinearScore;

/// Grid cell (row-major) holding a normalized point; 1.0 falls in the last cell.
pub fn grid_cell(x: f64, y: f64) -> usize {
    let idx = |v: f64| ((v * GRID as f64).floor().max(0.0) as usize).min(GRID - 1);
    idx(y) * GRID + idx(x)
}

pub fn class_counts(dets: &[PredictedObject], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_classes];
    for d in dets {
        if let Some(c) = counts.get_mut(d.class_id as usize) {
            *c += 1.0;
        }
    }
    counts
}

pub fn location_counts(dets: &[PredictedObject]) -> Vec<f64> {
    let mut counts = vec![0.0; GRID_CELLS];
    for d in dets {
        let (cx, cy) = d.bbox.center();
        counts[grid_cell(cx, cy)] += 1.0;
    }
    counts
}

/// Minimizes `mean((y − b − w·x)²) + λ‖w‖²` with the intercept unpenalized.
///
/// The mean (rather than the sum) makes the fit invariant to duplicating the
/// training set.
pub fn ridge_fit(xs: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<LinearScore> {
    if xs.is_empty() {
        return Err(Error::InvalidInput(
            "score model needs at least one training image".into(),
        ));
    }
    if xs.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "{} rows but {} targets",
            xs.len(),
            y.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "ridge penalty {lambda} must be finite and nonnegative"
        )));
    }
    let n = xs.len();
    let d = xs[0].len();
    if xs.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("count vectors differ in length".into()));
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;

    let xc = DMatrix::from_fn(n, d, |i, j| xs[i][j] - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut gram = xc.transpose() * &xc / nf;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc / nf;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::InvalidInput(format!("score regression is singular: {e}")))?,
    };
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - weights.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    let model = LinearScore { weights, intercept };
    if !model.intercept.is_finite() || model.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "score regression produced non-finite weights".into(),
        ));
    }
    Ok(model)
}

/// Fits the class score from `(detections, true metric)` pairs.
pub fn fit_class_score(
    train: &[(&[PredictedObject], f64)],
    num_classes: usize,
    lambda: f64,
) -> Result<ClassScoreModel> {
    let xs: Vec<Vec<f64>> = train.iter().map(|(d, _)| class_counts(d, num_classes)).collect();
    let y: Vec<f64> = train.iter().map(|(_, m)| *m).collect();
    ridge_fit(&xs, &y, lambda)
}

/// Fits the location score from `(detections, true metric)` pairs.
pub fn fit_location_score(train: &[(&[PredictedObject], f64)], lambda: f64) -> Result<LocationScoreModel> {
    let xs: Vec<Vec<f64>> = train.iter().map(|(d, _)| location_counts(d)).collect();
    let y: Vec<f64> = train.iter().map(|(_, m)| *m).collect();
    ridge_fit(&xs, &y, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;
    use proptest::prelude::*;

    fn det_at(cx: f64, cy: f64, class_id: u32) -> PredictedObject {
        PredictedObject {
            bbox: BBox::from_array([cx - 0.01, cy - 0.01, cx + 0.01, cy + 0.01]),
            class_id,
            class_confidence: 0.9,
            objectness: None,
        }
    }

    #[test]
    fn grid_cells() {
        assert_eq!(grid_cell(0.5, 0.5), 12);
        assert_eq!(grid_cell(0.0, 0.0), 0);
        assert_eq!(grid_cell(1.0, 1.0), 24);
        assert_eq!(grid_cell(0.2, 0.0), 1);
        assert_eq!(grid_cell(0.19999, 0.4), 10);
    }

    #[test]
    fn single_class_slope_recovered() {
        let images: Vec<Vec<PredictedObject>> = (0..8).map(|k| (0..k).map(|_| det_at(0.5, 0.5, 0)).collect()).collect();
        let train: Vec<(&[PredictedObject], f64)> =
            images.iter().map(|d| (d.as_slice(), 0.1 * d.len() as f64)).collect();
        let m = fit_class_score(&train, 1, 1e-12).unwrap();
        assert!((m.weights[0] - 0.1).abs() < 1e-6, "{m:?}");
        assert!(m.intercept.abs() < 1e-6);
    }

    #[test]
    fn constant_metric_gives_zero_weights() {
        let images: Vec<Vec<PredictedObject>> = (0..10)
            .map(|k| {
                (0..k % 4)
                    .map(|j| det_at(0.1 + 0.2 * j as f64, 0.3, j as u32))
                    .collect()
            })
            .collect();
        let train: Vec<(&[PredictedObject], f64)> = images.iter().map(|d| (d.as_slice(), 0.37)).collect();
        for m in [
            fit_class_score(&train, 4, DEFAULT_RIDGE).unwrap(),
            fit_location_score(&train, DEFAULT_RIDGE).unwrap(),
        ] {
            assert!(m.weights.iter().all(|w| w.abs() < 1e-12), "{m:?}");
            assert!((m.intercept - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn location_weight_on_cell_zero() {
        let images: Vec<Vec<PredictedObject>> = (0..10)
            .map(|k| (0..k).map(|_| det_at(0.05, 0.05, 0)).collect())
            .collect();
        let train: Vec<(&[PredictedObject], f64)> = images.iter().map(|d| (d.as_slice(), d.len() as f64)).collect();
        let m = fit_location_score(&train, 1e-12).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-6, "{m:?}");
        assert!(m.weights[1..].iter().all(|w| w.abs() < 1e-9));
        assert_eq!(m.weights.len(), GRID_CELLS);
    }

    #[test]
    fn duplicated_training_set_gives_same_model() {
        let images: Vec<Vec<PredictedObject>> = (0..12)
            .map(|k| {
                (0..k % 5)
                    .map(|j| det_at(0.15 * j as f64 + 0.05, 0.9, (k + j) as u32 % 3))
                    .collect()
            })
            .collect();
        let train: Vec<(&[PredictedObject], f64)> = images
            .iter()
            .enumerate()
            .map(|(i, d)| (d.as_slice(), (i as f64 * 0.37).sin().abs()))
            .collect();
        let doubled: Vec<_> = train.iter().chain(train.iter()).copied().collect();
        let a = fit_class_score(&train, 3, DEFAULT_RIDGE).unwrap();
        let b = fit_class_score(&doubled, 3, DEFAULT_RIDGE).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.intercept - b.intercept).abs() < 1e-9);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(fit_class_score(&[], 3, DEFAULT_RIDGE).is_err());
    }

    proptest! {
        #[test]
        fn cells_partition_unit_square(x in 0.0..=1.0f64, y in 0.0..=1.0f64) {
            let c = grid_cell(x, y);
            prop_assert!(c < GRID_CELLS);
            let (row, col) = (c / GRID, c % GRID);
            let lo = |k: usize| k as f64 / GRID as f64;
            prop_assert!(lo(col) <= x && (x < lo(col + 1) || col == GRID - 1));
            prop_assert!(lo(row) <= y && (y < lo(row + 1) || row == GRID - 1));
        }

        #[test]
        fn score_is_affine_in_counts(
            w in prop::collection::vec(-2.0..2.0f64, 5),
            b in -1.0..1.0f64,
            counts in prop::collection::vec(0.0..10.0f64, 5),
        ) {
            let m = LinearScore { weights: w, intercept: b };
            let doubled: Vec<f64> = counts.iter().map(|c| 2.0 * c).collect();
            let lhs = m.predict(&doubled) - b;
            let rhs = 2.0 * (m.predict(&counts) - b);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
