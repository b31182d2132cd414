//! Handcrafted features of one model's output on one image.
//!
//! The detection feature vector has a fixed order:
//!
//! | index | name             | source                                   |
//! |-------|------------------|------------------------------------------|
//! | 0     | `class_score`    | fitted class score model                 |
//! | 1     | `location_score` | fitted location score model              |
//! | 2     | `min_conf`       | combined confidence over detections      |
//! | 3     | `max_conf`       |                                          |
//! | 4     | `mean_conf`      |                                          |
//! | 5     | `num_boxes`      | detection count                          |
//! | 6     | `min_box_size`   | normalized box area                      |
//! | 7     | `mean_box_size`  |                                          |
//! | 8     | `hist_entropy`   | image (precomputed or decoded)           |
//! | 9     | `image_size`     | width · height in pixels                 |
//! | 10    | `num_corners`    | FAST corner count                        |
//!
//! Confidence and box-size features are 0 for an image without detections.

pub mod image;
pub mod scores;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, PredictedObject};
use crate::error::{Error, Result};
use crate::metrics::combined_confidence;
use image::FastConfig;
use scores::{ClassScoreModel, LocationScoreModel};

pub const NUM_FEATURES: usize = 11;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "class_score",
    "location_score",
    "min_conf",
    "max_conf",
    "mean_conf",
    "num_boxes",
    "min_box_size",
    "mean_box_size",
    "hist_entropy",
    "image_size",
    "num_corners",
];

pub const IMAGE_FEATURE_NAMES: [&str; 3] = ["hist_entropy", "image_size", "num_corners"];

const SCORE_FEATURES: usize = 2;

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|n| *n == name)
}

/// Which features an estimator sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    /// Everything except the fitted class and location scores.
    Essential,
    Custom(Vec<String>),
}

impl Profile {
    pub fn mask(&self) -> Result<[bool; NUM_FEATURES]> {
        match self {
            Profile::Full => Ok([true; NUM_FEATURES]),
            Profile::Essential => {
                let mut m = [true; NUM_FEATURES];
                m[..SCORE_FEATURES].fill(false);
                Ok(m)
            }
            Profile::Custom(names) => {
                let mut m = [false; NUM_FEATURES];
                for n in names {
                    let i = feature_index(n).ok_or_else(|| Error::Config(format!("unknown feature `{n}`")))?;
                    m[i] = true;
                }
                if !m.contains(&true) {
                    return Err(Error::Config("custom profile selects no features".into()));
                }
                Ok(m)
            }
        }
    }

    pub fn needs_scores(&self) -> Result<bool> {
        Ok(self.mask()?[..SCORE_FEATURES].contains(&true))
    }

    pub fn active_names(&self) -> Result<Vec<String>> {
        let mask = self.mask()?;
        Ok(FEATURE_NAMES
            .iter()
            .zip(mask)
            .filter(|(_, on)| *on)
            .map(|(n, _)| n.to_string())
            .collect())
    }

    pub fn name(&self) -> String {
        match self {
            Profile::Full => "full".into(),
            Profile::Essential => "essential".into(),
            Profile::Custom(names) => format!("custom:{}", names.join(",")),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    /// `full`, `essential`, or `custom:name1,name2,...`.
    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "full" => Profile::Full,
            "essential" => Profile::Essential,
            _ => match s.strip_prefix("custom:") {
                Some(list) => Profile::Custom(list.split(',').map(|n| n.trim().to_string()).collect()),
                None => return Err(Error::Config(format!("unknown profile `{s}`"))),
            },
        };
        p.mask()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; NUM_FEATURES],
    pub mask: [bool; NUM_FEATURES],
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.values[i])
    }

    pub fn active(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.mask)
            .filter(|(_, on)| *on)
            .map(|(v, _)| *v)
            .collect()
    }

    pub fn active_names(&self) -> Vec<&'static str> {
        FEATURE_NAMES
            .iter()
            .zip(self.mask)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }
}

/// Settings for the image features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatureConfig {
    /// Value used for an image feature that can be neither read nor computed.
    pub sentinel: f64,
    pub hist_bins: usize,
    pub fast: FastConfig,
}

impl Default for ImageFeatureConfig {
    fn default() -> Self {
        ImageFeatureConfig {
            sentinel: -1.0,
            hist_bins: 32,
            fast: FastConfig::default(),
        }
    }
}

/// `hist_entropy`, `image_size` and `num_corners` for one record.
///
/// Precomputed values win. Missing values are computed from the raw image
/// when one is referenced; otherwise they take the sentinel. An unreadable
/// raw image is an error only when the record has no precomputed features.
pub fn image_features(rec: &ImageRecord, cfg: &ImageFeatureConfig) -> Result<[f64; 3]> {
    let pre = rec.image_features.as_ref();
    let lookup = |name: &str| pre.and_then(|m| m.get(name)).copied();
    let mut out = [
        lookup("hist_entropy"),
        lookup("image_size").or(Some(rec.width as f64 * rec.height as f64)),
        lookup("num_corners"),
    ];
    if out.iter().any(Option::is_none) {
        if let Some(path) = &rec.raw_image {
            match decode_file(path) {
                Ok(img) => {
                    out[0] = out[0].or(Some(image::histogram_entropy(&img, cfg.hist_bins)));
                    let luma = img.luma();
                    out[2] = out[2].or(Some(
                        image::count_fast_corners(&luma, img.width, img.height, cfg.fast) as f64
                    ));
                }
                Err(e) if pre.is_none() => {
                    return Err(Error::FeatureExtraction {
                        image_id: rec.image_id.clone(),
                        message: e.to_string(),
                    })
                }
                Err(e) => log::warn!("image `{}`: {e}; using sentinel", rec.image_id),
            }
        }
    }
    Ok(out.map(|v| v.unwrap_or(cfg.sentinel)))
}

fn decode_file(path: &Path) -> Result<image::RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::decode_pnm(&bytes)
}

/// Fitted class and location score models for one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModels {
    pub version: u32,
    pub num_classes: usize,
    pub ridge: f64,
    pub class: ClassScoreModel,
    pub location: LocationScoreModel,
}

impl ScoreModels {
    pub const VERSION: u32 = 1;

    /// Fits both score models from `(detections, true metric)` pairs.
    pub fn fit(train: &[(&[PredictedObject], f64)], num_classes: usize, ridge: f64) -> Result<Self> {
        Ok(ScoreModels {
            version: Self::VERSION,
            num_classes,
            ridge,
            class: scores::fit_class_score(train, num_classes, ridge)?,
            location: scores::fit_location_score(train, ridge)?,
        })
    }

    pub fn class_score(&self, dets: &[PredictedObject]) -> f64 {
        self.class.predict(&scores::class_counts(dets, self.num_classes))
    }

    pub fn location_score(&self, dets: &[PredictedObject]) -> f64 {
        self.location.predict(&scores::location_counts(dets))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != Self::VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported score model version {}",
                self.version
            )));
        }
        self.class.validate(self.num_classes, "class score")?;
        self.location.validate(scores::GRID_CELLS, "location score")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: ScoreModels = serde_json::from_str(s).map_err(|e| Error::ModelFile(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// The eight model features; the two scores are 0 without fitted models.
pub fn model_features(dets: &[PredictedObject], scores: Option<&ScoreModels>) -> [f64; 8] {
    let (class_score, location_score) = match scores {
        Some(s) => (s.class_score(dets), s.location_score(dets)),
        None => (0.0, 0.0),
    };
    if dets.is_empty() {
        return [class_score, location_score, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    }
    let n = dets.len() as f64;
    let confs: Vec<f64> = dets.iter().map(combined_confidence).collect();
    let areas: Vec<f64> = dets.iter().map(|d| d.bbox.area()).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [
        class_score,
        location_score,
        min(&confs),
        max(&confs),
        confs.iter().sum::<f64>() / n,
        n,
        min(&areas),
        areas.iter().sum::<f64>() / n,
    ]
}

/// Builds the feature vector of `model_id` on `rec` under `profile`.
pub fn assemble(
    rec: &ImageRecord,
    model_id: &str,
    profile: &Profile,
    scores: Option<&ScoreModels>,
    cfg: &ImageFeatureConfig,
) -> Result<FeatureVector> {
    let mask = profile.mask()?;
    if profile.needs_scores()? && scores.is_none() {
        return Err(Error::Config(format!(
            "profile `{}` needs fitted class and location score models",
            profile.name()
        )));
    }
    let dets = rec.detections(model_id)?;
    let mut values = [0.0; NUM_FEATURES];
    values[..8].copy_from_slice(&model_features(dets, scores));
    values[8..].copy_from_slice(&image_features(rec, cfg)?);
    Ok(FeatureVector { values, mask })
}

/// Named design matrix, one row per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>) -> Self {
        FeatureMatrix {
            names,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = FeatureMatrix { names, rows };
        m.check()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.names.len() {
            return Err(Error::InvalidInput(format!(
                "row has {} values, expected {}",
                row.len(),
                self.names.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// The sub-matrix of the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            names: self.names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Fails unless every row has one finite value per name.
    pub fn check(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != self.names.len() {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} values, expected {}",
                    r.len(),
                    self.names.len()
                )));
            }
            if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "feature `{}` of row {i} is not finite",
                    self.names[j]
                )));
            }
        }
        Ok(())
    }

    /// Fails unless `names` equals this matrix's names.
    pub fn require_names(&self, names: &[String]) -> Result<()> {
        if self.names != names {
            return Err(Error::ProfileMismatch {
                expected: names.to_vec(),
                actual: self.names.clone(),
            });
        }
        Ok(())
    }
}

/// Names of the classification features for `num_classes` logits followed by
/// the image features and any extra precomputed features.
pub fn classification_feature_names(num_classes: usize, extra: &[String]) -> Vec<String> {
    let mut names: Vec<String> = (0..num_classes).map(|k| format!("logit_{k}")).collect();
    names.push("predicted_class".into());
    names.push("max_prob".into());
    names.extend(IMAGE_FEATURE_NAMES.iter().map(|s| s.to_string()));
    names.extend(extra.iter().cloned());
    names
}

/// Classification features from (possibly calibrated) logits.
pub fn classification_features(
    logits: &[f64],
    rec: &ImageRecord,
    extra: &[String],
    cfg: &ImageFeatureConfig,
) -> Result<Vec<f64>> {
    let probs = softmax(logits);
    let pred = crate::data::argmax(logits);
    let mut row = logits.to_vec();
    row.push(pred as f64);
    row.push(probs[pred]);
    row.extend(image_features(rec, cfg)?);
    let pre = rec.image_features.as_ref();
    for name in extra {
        row.push(pre.and_then(|m| m.get(name)).copied().unwrap_or(cfg.sentinel));
    }
    Ok(row)
}

/// Precomputed feature names beyond the standard image features, sorted.
pub fn extra_feature_names<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> Vec<String> {
    let mut names = std::collections::BTreeSet::new();
    for r in records {
        if let Some(m) = &r.image_features {
            names.extend(m.keys().filter(|k| !IMAGE_FEATURE_NAMES.contains(&k.as_str())).cloned());
        }
    }
    names.into_iter().collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Per-name feature values as written to reports.
pub fn to_named(names: &[String], row: &[f64]) -> BTreeMap<String, f64> {
    names.iter().cloned().zip(row.iter().copied()).collect()
}
