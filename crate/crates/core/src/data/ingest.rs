//! Line-delimited JSON corpus format.
//!
//! One record per line:
//!
//! ```text
//! {"image_id": "img-0", "width": 640, "height": 480,
//!  "gt": [{"bbox": [0.1, 0.1, 0.3, 0.4], "class": 2}],
//!  "models": {"ssd": {"dets": [{"bbox": [...], "class": 2, "conf": 0.9, "obj": 0.8}]},
//!             "resnet": {"logits": [0.1, 2.3], "true_class": 1}},
//!  "image_path": "img-0.ppm", "features": {"num_corners": 42.0}, "split": "test"}
//! ```
//!
//! `obj`, `image_path`, `features` and `split` are optional. Classification
//! records carry the true class inside each model entry; `gt` may be omitted.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    BBox, ClassificationOutput, Corpus, GroundTruth, GroundTruthObject, ImageRecord, ModelOutput, PredictedObject,
    Split, Task,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub task: Task,
    /// Number of classes; inferred from the data when absent.
    pub num_classes: Option<usize>,
}

impl IngestOptions {
    pub fn new(task: Task) -> Self {
        IngestOptions {
            task,
            num_classes: None,
        }
    }

    pub fn with_num_classes(mut self, n: usize) -> Self {
        self.num_classes = Some(n);
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    image_id: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    gt: Vec<WireGt>,
    models: BTreeMap<String, WireModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireGt {
    bbox: [f64; 4],
    class: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum WireModel {
    Detections(WireDetections),
    Classification(WireLogits),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireDetections {
    dets: Vec<WireDet>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLogits {
    logits: Vec<f64>,
    true_class: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireDet {
    bbox: [f64; 4],
    class: u32,
    conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    obj: Option<f64>,
}

fn invalid(line: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::InvalidField {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn check_unit(line: usize, field: String, v: f64) -> Result<()> {
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(invalid(line, field, format!("value {v} outside [0,1]")));
    }
    Ok(())
}

fn convert(line: usize, w: WireRecord, task: Task) -> Result<(ImageRecord, Option<Split>)> {
    if w.image_id.is_empty() {
        return Err(invalid(line, "image_id", "must be non-empty"));
    }
    if w.width == 0 {
        return Err(invalid(line, "width", "must be positive"));
    }
    if w.height == 0 {
        return Err(invalid(line, "height", "must be positive"));
    }
    if w.models.is_empty() {
        return Err(invalid(line, "models", "at least one model output is required"));
    }

    let mut gts = Vec::with_capacity(w.gt.len());
    for (i, g) in w.gt.iter().enumerate() {
        let bbox = BBox::from_array(g.bbox);
        bbox.check().map_err(|m| invalid(line, format!("gt[{i}].bbox"), m))?;
        gts.push(GroundTruthObject {
            bbox,
            class_id: g.class,
        });
    }

    let mut outputs = BTreeMap::new();
    let mut true_class: Option<usize> = None;
    for (model_id, m) in w.models {
        let out = match (task, m) {
            (Task::Detection, WireModel::Detections(d)) => {
                let mut dets = Vec::with_capacity(d.dets.len());
                for (i, det) in d.dets.into_iter().enumerate() {
                    let prefix = format!("models.{model_id}.dets[{i}]");
                    let bbox = BBox::from_array(det.bbox);
                    bbox.check().map_err(|m| invalid(line, format!("{prefix}.bbox"), m))?;
                    check_unit(line, format!("{prefix}.conf"), det.conf)?;
                    if let Some(o) = det.obj {
                        check_unit(line, format!("{prefix}.obj"), o)?;
                    }
                    dets.push(PredictedObject {
                        bbox,
                        class_id: det.class,
                        class_confidence: det.conf,
                        objectness: det.obj,
                    });
                }
                ModelOutput::Detections(dets)
            }
            (Task::Classification, WireModel::Classification(c)) => {
                let field = format!("models.{model_id}.logits");
                if c.logits.is_empty() {
                    return Err(invalid(line, field, "must be non-empty"));
                }
                if c.logits.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(line, field, "must be finite"));
                }
                if c.true_class >= c.logits.len() {
                    return Err(invalid(
                        line,
                        format!("models.{model_id}.true_class"),
                        format!("{} out of range for {} logits", c.true_class, c.logits.len()),
                    ));
                }
                match true_class {
                    Some(t) if t != c.true_class => {
                        return Err(invalid(
                            line,
                            format!("models.{model_id}.true_class"),
                            format!("disagrees with another model's true_class {t}"),
                        ))
                    }
                    _ => true_class = Some(c.true_class),
                }
                ModelOutput::Classification(ClassificationOutput::new(c.logits, c.true_class))
            }
            (Task::Detection, WireModel::Classification(_)) => {
                return Err(invalid(
                    line,
                    format!("models.{model_id}"),
                    "expected detections for a detection corpus",
                ))
            }
            (Task::Classification, WireModel::Detections(_)) => {
                return Err(invalid(
                    line,
                    format!("models.{model_id}"),
                    "expected logits for a classification corpus",
                ))
            }
        };
        outputs.insert(model_id, out);
    }

    let ground_truth = match task {
        Task::Detection => GroundTruth::Objects(gts),
        Task::Classification => {
            if !gts.is_empty() {
                return Err(invalid(line, "gt", "classification records carry no boxes"));
            }
            GroundTruth::Class(true_class.expect("at least one classification output"))
        }
    };

    if let Some(f) = &w.features {
        for (k, v) in f {
            if !v.is_finite() {
                return Err(invalid(line, format!("features.{k}"), "must be finite"));
            }
        }
    }

    Ok((
        ImageRecord {
            image_id: w.image_id,
            width: w.width,
            height: w.height,
            ground_truth,
            outputs,
            raw_image: w.image_path.map(PathBuf::from),
            image_features: w.features,
        },
        w.split,
    ))
}

fn infer_num_classes<'a>(records: impl Iterator<Item = &'a ImageRecord>) -> usize {
    let mut n = 0usize;
    for r in records {
        match &r.ground_truth {
            GroundTruth::Objects(o) => {
                for g in o {
                    n = n.max(g.class_id as usize + 1);
                }
            }
            GroundTruth::Class(c) => n = n.max(c + 1),
        }
        for out in r.outputs.values() {
            match out {
                ModelOutput::Detections(d) => {
                    for p in d {
                        n = n.max(p.class_id as usize + 1);
                    }
                }
                ModelOutput::Classification(c) => n = n.max(c.logits.len()),
            }
        }
    }
    n.max(1)
}

impl Corpus {
    /// Reads and validates a corpus from line-delimited JSON.
    pub fn from_reader(reader: impl BufRead, opts: &IngestOptions) -> Result<Corpus> {
        let mut records = Vec::new();
        let mut split_labels = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let wire: WireRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            let (rec, split) = convert(lineno, wire, opts.task)?;
            if !seen.insert(rec.image_id.clone()) {
                return Err(Error::DuplicateId {
                    line: lineno,
                    image_id: rec.image_id,
                });
            }
            records.push((lineno, rec));
            split_labels.push(split);
        }

        let num_classes = match opts.num_classes {
            Some(n) => n,
            None => infer_num_classes(records.iter().map(|(_, r)| r)),
        };
        for (lineno, r) in &records {
            for (i, g) in r.gt_objects().iter().enumerate() {
                if g.class_id as usize >= num_classes {
                    return Err(invalid(
                        *lineno,
                        format!("gt[{i}].class"),
                        format!("{} >= num_classes {num_classes}", g.class_id),
                    ));
                }
            }
            for (model_id, out) in &r.outputs {
                if let ModelOutput::Classification(c) = out {
                    if c.logits.len() != num_classes {
                        return Err(invalid(
                            *lineno,
                            format!("models.{model_id}.logits"),
                            format!("length {} != num_classes {num_classes}", c.logits.len()),
                        ));
                    }
                }
            }
        }

        let labelled = split_labels.iter().filter(|s| s.is_some()).count();
        if labelled != 0 && labelled != split_labels.len() {
            let line = records[split_labels.iter().position(|s| s.is_none()).unwrap()].0;
            return Err(invalid(
                line,
                "split",
                "either every record or no record must carry a split label",
            ));
        }
        let splits = records
            .iter()
            .zip(&split_labels)
            .filter_map(|((_, r), s)| s.map(|s| (r.image_id.clone(), s)))
            .collect();

        Ok(Corpus {
            task: opts.task,
            num_classes,
            records: records.into_iter().map(|(_, r)| r).collect(),
            splits,
        })
    }

    pub fn from_jsonl_str(s: &str, opts: &IngestOptions) -> Result<Corpus> {
        Corpus::from_reader(s.as_bytes(), opts)
    }

    pub fn ingest(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<Corpus> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Corpus::from_reader(BufReader::new(f), opts)
    }

    /// Writes the corpus in the ingest format, one record per line, with a
    /// `split` field on every record when the corpus is split.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            let wire = to_wire(r, self.split_of(&r.image_id));
            serde_json::to_writer(&mut w, &wire)?;
            w.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn to_wire(r: &ImageRecord, split: Option<Split>) -> WireRecord {
    let gt = r
        .gt_objects()
        .iter()
        .map(|g| WireGt {
            bbox: g.bbox.to_array(),
            class: g.class_id,
        })
        .collect();
    let models = r
        .outputs
        .iter()
        .map(|(id, out)| {
            let m = match out {
                ModelOutput::Detections(d) => WireModel::Detections(WireDetections {
                    dets: d
                        .iter()
                        .map(|p| WireDet {
                            bbox: p.bbox.to_array(),
                            class: p.class_id,
                            conf: p.class_confidence,
                            obj: p.objectness,
                        })
                        .collect(),
                }),
                ModelOutput::Classification(c) => WireModel::Classification(WireLogits {
                    logits: c.logits.clone(),
                    true_class: c.true_class,
                }),
            };
            (id.clone(), m)
        })
        .collect();
    WireRecord {
        image_id: r.image_id.clone(),
        width: r.width,
        height: r.height,
        gt,
        models,
        image_path: r.raw_image.as_ref().map(|p| p.to_string_lossy().into_owned()),
        features: r.image_features.clone(),
        split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DET3: &str = r#"{"image_id":"a","width":10,"height":10,"gt":[{"bbox":[0,0,0.5,0.5],"class":0}],"models":{"m":{"dets":[{"bbox":[0,0,0.5,0.5],"class":0,"conf":0.9}]}}}
{"image_id":"b","width":10,"height":20,"gt":[],"models":{"m":{"dets":[]}}}
{"image_id":"c","width":10,"height":10,"gt":[{"bbox":[0.1,0.1,0.2,0.2],"class":1}],"models":{"m":{"dets":[{"bbox":[0.1,0.1,0.2,0.2],"class":1,"conf":0.5,"obj":0.4}]}}}
"#;

    #[test]
    fn three_valid_lines() {
        let c = Corpus::from_jsonl_str(DET3, &IngestOptions::new(Task::Detection)).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.num_classes, 2);
        assert_eq!(c.records[2].detections("m").unwrap()[0].objectness, Some(0.4));
        assert!(!c.is_split());
    }

    #[test]
    fn confidence_above_one_names_field_and_line() {
        let text = DET3.replace("\"conf\":0.5", "\"conf\":1.2");
        let err = Corpus::from_jsonl_str(&text, &IngestOptions::new(Task::Detection)).unwrap_err();
        match err {
            Error::InvalidField { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "models.m.dets[0].conf");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = DET3.replace("\"image_id\":\"b\"", "\"image_id\":\"a\"");
        let err = Corpus::from_jsonl_str(&text, &IngestOptions::new(Task::Detection)).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{DET3}{{not json\n");
        let err = Corpus::from_jsonl_str(&text, &IngestOptions::new(Task::Detection)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn unordered_bbox_rejected() {
        let text = DET3.replace("[0.1,0.1,0.2,0.2],\"class\":1}]", "[0.3,0.1,0.2,0.2],\"class\":1}]");
        let err = Corpus::from_jsonl_str(&text, &IngestOptions::new(Task::Detection)).unwrap_err();
        assert!(matches!(err, Error::InvalidField { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn task_mismatch_rejected() {
        let err = Corpus::from_jsonl_str(DET3, &IngestOptions::new(Task::Classification)).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn classification_true_class_from_models() {
        let text = r#"{"image_id":"x","width":4,"height":4,"models":{"r":{"logits":[0.1,2.0,0.3],"true_class":1},"s":{"logits":[3.0,0.0,0.0],"true_class":1}}}"#;
        let c = Corpus::from_jsonl_str(text, &IngestOptions::new(Task::Classification)).unwrap();
        assert_eq!(c.records[0].true_class(), Some(1));
        assert!(c.records[0].classification("r").unwrap().is_correct());
        assert!(!c.records[0].classification("s").unwrap().is_correct());
        assert_eq!(c.num_classes, 3);
    }

    #[test]
    fn disagreeing_true_class_rejected() {
        let text = r#"{"image_id":"x","width":4,"height":4,"models":{"r":{"logits":[0.1,2.0],"true_class":1},"s":{"logits":[3.0,0.0],"true_class":0}}}"#;
        assert!(Corpus::from_jsonl_str(text, &IngestOptions::new(Task::Classification)).is_err());
    }

    #[test]
    fn partial_split_labels_rejected() {
        let text = DET3.replacen("\"height\":10,", "\"height\":10,\"split\":\"test\",", 1);
        let err = Corpus::from_jsonl_str(&text, &IngestOptions::new(Task::Detection)).unwrap_err();
        assert!(matches!(err, Error::InvalidField { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn gt_class_checked_against_num_classes() {
        let opts = IngestOptions::new(Task::Detection).with_num_classes(1);
        let err = Corpus::from_jsonl_str(DET3, &opts).unwrap_err();
        assert!(matches!(err, Error::InvalidField { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn serialize_then_ingest_is_identity() {
        let c = Corpus::from_jsonl_str(DET3, &IngestOptions::new(Task::Detection)).unwrap();
        let text = c.to_jsonl_string();
        let back = Corpus::from_jsonl_str(&text, &IngestOptions::new(Task::Detection)).unwrap();
        assert_eq!(c, back);
    }
}
