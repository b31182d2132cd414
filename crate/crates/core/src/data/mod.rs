//! Record types for recorded black-box model outputs and their ground truth.
//!
//! A [`Corpus`] holds one [`ImageRecord`] per input image. Every record
//! carries the ground truth plus the outputs of one or more models, keyed by
//! model id. Detection models produce lists of [`PredictedObject`];
//! classifiers produce a [`ClassificationOutput`] with raw logits.

mod ingest;
mod split;
pub mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::IngestOptions;
pub use split::{resample_shift, split};
pub use synth::generate_synthetic;

/// Whether the corpus holds detection or classification outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Classification,
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.check().map_err(Error::InvalidInput)?;
        Ok(b)
    }

    pub(crate) fn check(&self) -> std::result::Result<(), String> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(format!("coordinates {coords:?} must lie in [0,1]"));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(format!("coordinates {coords:?} are not ordered min <= max"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BBox {
            x_min: a[0],
            y_min: a[1],
            x_max: a[2],
            y_max: a[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedObject {
    pub bbox: BBox,
    pub class_id: u32,
    pub class_confidence: f64,
    /// Location/objectness confidence for models that report one.
    pub objectness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: BBox,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutput {
    pub logits: Vec<f64>,
    pub predicted_class: usize,
    pub true_class: usize,
}

impl ClassificationOutput {
    /// Builds an output whose predicted class is the argmax of `logits`.
    pub fn new(logits: Vec<f64>, true_class: usize) -> Self {
        let predicted_class = argmax(&logits);
        ClassificationOutput {
            logits,
            predicted_class,
            true_class,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.predicted_class == self.true_class
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// What one model produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelOutput {
    Detections(Vec<PredictedObject>),
    Classification(ClassificationOutput),
}

impl ModelOutput {
    pub fn detections(&self) -> Option<&[PredictedObject]> {
        match self {
            ModelOutput::Detections(d) => Some(d),
            ModelOutput::Classification(_) => None,
        }
    }

    pub fn classification(&self) -> Option<&ClassificationOutput> {
        match self {
            ModelOutput::Classification(c) => Some(c),
            ModelOutput::Detections(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroundTruth {
    Objects(Vec<GroundTruthObject>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub ground_truth: GroundTruth,
    pub outputs: BTreeMap<String, ModelOutput>,
    pub raw_image: Option<PathBuf>,
    pub image_features: Option<BTreeMap<String, f64>>,
}

impl ImageRecord {
    pub fn output(&self, model_id: &str) -> Result<&ModelOutput> {
        self.outputs.get(model_id).ok_or_else(|| Error::MissingModel {
            image_id: self.image_id.clone(),
            model_id: model_id.to_string(),
        })
    }

    pub fn detections(&self, model_id: &str) -> Result<&[PredictedObject]> {
        self.output(model_id)?.detections().ok_or_else(|| {
            Error::InvalidInput(format!(
                "model `{model_id}` on image `{}` has classification output, expected detections",
                self.image_id
            ))
        })
    }

    pub fn classification(&self, model_id: &str) -> Result<&ClassificationOutput> {
        self.output(model_id)?.classification().ok_or_else(|| {
            Error::InvalidInput(format!(
                "model `{model_id}` on image `{}` has detection output, expected logits",
                self.image_id
            ))
        })
    }

    pub fn gt_objects(&self) -> &[GroundTruthObject] {
        match &self.ground_truth {
            GroundTruth::Objects(o) => o,
            GroundTruth::Class(_) => &[],
        }
    }

    pub fn true_class(&self) -> Option<usize> {
        match self.ground_truth {
            GroundTruth::Class(c) => Some(c),
            GroundTruth::Objects(_) => None,
        }
    }
}

/// Role of a record in the experiment protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Fits auxiliary calibrators (V1).
    TrainFc,
    /// Trains the post-hoc estimator (V2).
    TrainPosthoc,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainFc, Split::TrainPosthoc, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainFc => "train_fc",
            Split::TrainPosthoc => "train_posthoc",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_fc" => Ok(Split::TrainFc),
            "train_posthoc" => Ok(Split::TrainPosthoc),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: Task,
    pub num_classes: usize,
    pub records: Vec<ImageRecord>,
    /// Split label per image id. Either empty or covering every record.
    pub splits: BTreeMap<String, Split>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_split(&self) -> bool {
        !self.splits.is_empty()
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.splits.get(image_id).copied()
    }

    /// Records carrying the given split label, in corpus order.
    pub fn records_in(&self, split: Split) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| self.split_of(&r.image_id) == Some(split))
            .collect()
    }

    /// Like [`Corpus::records_in`] but fails when the split is empty.
    pub fn require_split(&self, split: Split) -> Result<Vec<&ImageRecord>> {
        let recs = self.records_in(split);
        if recs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "corpus has no records in split `{}`",
                split.name()
            )));
        }
        Ok(recs)
    }

    /// Model ids present on every record, sorted.
    pub fn common_models(&self) -> Vec<String> {
        let Some(first) = self.records.first() else {
            return Vec::new();
        };
        first
            .outputs
            .keys()
            .filter(|id| self.records.iter().all(|r| r.outputs.contains_key(*id)))
            .cloned()
            .collect()
    }

    pub fn require_model(&self, model_id: &str) -> Result<()> {
        for r in &self.records {
            r.output(model_id)?;
        }
        Ok(())
    }

    /// Returns a copy holding only the records for which `keep` is true.
    pub fn filtered(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Corpus {
        let records: Vec<ImageRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let splits = records
            .iter()
            .filter_map(|r| self.split_of(&r.image_id).map(|s| (r.image_id.clone(), s)))
            .collect();
        Corpus {
            task: self.task,
            num_classes: self.num_classes,
            records,
            splits,
        }
    }
}
