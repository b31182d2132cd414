//! Seeded synthetic corpora with controllable failure modes.
//!
//! Detection scenes place ground-truth boxes in distinct cells of a 5×5
//! grid, so boxes never overlap and every per-image metric is computable by
//! hand. Each simulated detector misses objects, jitters boxes and emits
//! false positives according to a [`NoiseProfile`] that may be overridden in
//! particular scene [`Regime`]s (crowded, hard, high-entropy, ...). Detection
//! confidences follow `clamp(q·correct + (1−q)·U(0,1))` with quality knob
//! `q`, so the informativeness of the confidence baseline can be dialled.
//!
//! Classification corpora draw logits around an anchor class and sample the
//! label from the softmax of the unscaled logits; a logit scale other than 1
//! then makes the reported logits miscalibrated by a known factor.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    BBox, ClassificationOutput, Corpus, GroundTruth, GroundTruthObject, ImageRecord, ModelOutput, PredictedObject, Task,
};
use crate::error::{Error, Result};
use crate::metrics::iou;

pub const GRID: usize = 5;
const CELL: f64 = 1.0 / GRID as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub num_classes: usize,
    pub scene: SceneSpec,
    pub models: ModelSpecs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Inclusive range of ground-truth objects per detection image (≤ 25).
    pub objects_per_image: (usize, usize),
    /// Inclusive range of box side lengths, at most one grid cell (0.2).
    pub box_side: (f64, f64),
    pub width: (u32, u32),
    pub height: (u32, u32),
    /// Probability that an image is "hard" (see [`Regime::hard`]).
    pub hard_fraction: f64,
    /// Range of the precomputed `hist_entropy` feature.
    pub entropy_range: (f64, f64),
    /// `num_corners ≈ corners_per_object · objects + U(0, corners_noise)`.
    pub corners_per_object: f64,
    pub corners_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            objects_per_image: (1, 6),
            box_side: (0.08, 0.2),
            width: (320, 640),
            height: (240, 480),
            hard_fraction: 0.0,
            entropy_range: (3.0, 9.0),
            corners_per_object: 25.0,
            corners_noise: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum ModelSpecs {
    Detection {
        detectors: Vec<DetectorSpec>,
        /// Builds the first detector's output so its per-image F1 follows a
        /// linear function of its mean confidence.
        #[serde(default)]
        confidence_link: Option<ConfidenceLink>,
    },
    Classification {
        classifiers: Vec<ClassifierSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub miss_rate: f64,
    /// Chance, per ground-truth object, of an extra false positive.
    pub fp_rate: f64,
    /// Box-coordinate noise in units of box side length.
    pub jitter: f64,
    pub confidence_quality: f64,
}

impl NoiseProfile {
    pub const PERFECT: NoiseProfile = NoiseProfile {
        miss_rate: 0.0,
        fp_rate: 0.0,
        jitter: 0.0,
        confidence_quality: 1.0,
    };
}

/// Scene condition; every populated field must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    #[serde(default)]
    pub min_objects: Option<usize>,
    #[serde(default)]
    pub max_objects: Option<usize>,
    #[serde(default)]
    pub hard: Option<bool>,
    #[serde(default)]
    pub entropy_above: Option<f64>,
    #[serde(default)]
    pub entropy_below: Option<f64>,
}

impl Regime {
    fn matches(&self, scene: &SceneLatents) -> bool {
        self.min_objects.is_none_or(|m| scene.num_objects >= m)
            && self.max_objects.is_none_or(|m| scene.num_objects <= m)
            && self.hard.is_none_or(|h| scene.hard == h)
            && self.entropy_above.is_none_or(|e| scene.entropy > e)
            && self.entropy_below.is_none_or(|e| scene.entropy <= e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOverride {
    pub when: Regime,
    pub noise: NoiseProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub model_id: String,
    pub noise: NoiseProfile,
    /// First matching override replaces `noise` for that image.
    #[serde(default)]
    pub overrides: Vec<NoiseOverride>,
    /// Emit an objectness score next to the class confidence.
    #[serde(default)]
    pub objectness: bool,
    /// Extra miss probability per ground-truth class.
    #[serde(default)]
    pub class_miss: Vec<f64>,
    /// Extra miss probability for objects centred in border cells.
    #[serde(default)]
    pub border_miss: f64,
    /// Relative class weights of false positives; uniform when empty.
    #[serde(default)]
    pub fp_class_weights: Vec<f64>,
    /// Probability that a false positive lands in a border cell.
    #[serde(default)]
    pub fp_border_prob: Option<f64>,
}

impl DetectorSpec {
    pub fn new(model_id: &str, noise: NoiseProfile) -> Self {
        DetectorSpec {
            model_id: model_id.to_string(),
            noise,
            overrides: Vec::new(),
            objectness: false,
            class_miss: Vec::new(),
            border_miss: 0.0,
            fp_class_weights: Vec::new(),
            fp_border_prob: None,
        }
    }

    pub fn with_override(mut self, when: Regime, noise: NoiseProfile) -> Self {
        self.overrides.push(NoiseOverride { when, noise });
        self
    }

    fn noise_for(&self, scene: &SceneLatents) -> NoiseProfile {
        self.overrides
            .iter()
            .find(|o| o.when.matches(scene))
            .map(|o| o.noise)
            .unwrap_or(self.noise)
    }
}

/// Target F1 = clamp(intercept + slope · mean_conf + N(0, noise_sd)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceLink {
    pub intercept: f64,
    pub slope: f64,
    pub noise_sd: f64,
    /// Inclusive range of detections per image.
    pub detections: (usize, usize),
    /// Spread of per-detection confidence around the image's latent level.
    pub confidence_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub model_id: String,
    /// Logit margin of the anchor class on ordinary images.
    pub signal: f64,
    /// Logit margin on hard images.
    pub hard_signal: f64,
    pub noise_sd: f64,
    /// Factor applied to the reported logits; 1 means calibrated.
    pub logit_scale: f64,
    pub hard_logit_scale: f64,
}

impl ClassifierSpec {
    pub fn calibrated(model_id: &str, signal: f64) -> Self {
        ClassifierSpec {
            model_id: model_id.to_string(),
            signal,
            hard_signal: signal,
            noise_sd: 1.0,
            logit_scale: 1.0,
            hard_logit_scale: 1.0,
        }
    }
}

/// Ready-made scenarios used by tests, the acceptance suite and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// One perfect detector with confidence 1 on every detection.
    Noiseless,
    /// Two detectors of different quality.
    Basic,
    /// Per-image F1 = clamp(0.2 + 0.6·mean_conf + N(0, 0.05²)).
    ConfidenceLinked,
    /// Client/server pair; the server only helps on crowded scenes.
    Offload,
    /// Four detectors, each best in one entropy × crowding quadrant.
    Selection,
    /// False positives concentrated on a few classes and the image border.
    FeatureLinked,
    /// Ten-class classifier with calibrated logits.
    Classification,
    /// Ten-class classifier, overconfident on hard (blurry) images.
    Shift,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Noiseless,
        Preset::Basic,
        Preset::ConfidenceLinked,
        Preset::Offload,
        Preset::Selection,
        Preset::FeatureLinked,
        Preset::Classification,
        Preset::Shift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Noiseless => "noiseless",
            Preset::Basic => "basic",
            Preset::ConfidenceLinked => "confidence-linked",
            Preset::Offload => "offload",
            Preset::Selection => "selection",
            Preset::FeatureLinked => "feature-linked",
            Preset::Classification => "classification",
            Preset::Shift => "shift",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

fn noise(miss_rate: f64, fp_rate: f64, jitter: f64, confidence_quality: f64) -> NoiseProfile {
    NoiseProfile {
        miss_rate,
        fp_rate,
        jitter,
        confidence_quality,
    }
}

impl SyntheticConfig {
    pub fn task(&self) -> Task {
        match self.models {
            ModelSpecs::Detection { .. } => Task::Detection,
            ModelSpecs::Classification { .. } => Task::Classification,
        }
    }

    pub fn model_ids(&self) -> Vec<String> {
        match &self.models {
            ModelSpecs::Detection { detectors, .. } => detectors.iter().map(|d| d.model_id.clone()).collect(),
            ModelSpecs::Classification { classifiers } => classifiers.iter().map(|c| c.model_id.clone()).collect(),
        }
    }

    pub fn preset(preset: Preset) -> Self {
        let scene = SceneSpec::default();
        match preset {
            Preset::Noiseless => SyntheticConfig {
                num_images: 200,
                num_classes: 5,
                scene,
                models: ModelSpecs::Detection {
                    detectors: vec![DetectorSpec::new("model", NoiseProfile::PERFECT)],
                    confidence_link: None,
                },
            },
            Preset::Basic => SyntheticConfig {
                num_images: 1000,
                num_classes: 10,
                scene: SceneSpec {
                    hard_fraction: 0.2,
                    ..scene
                },
                models: ModelSpecs::Detection {
                    detectors: vec![
                        DetectorSpec::new("small", noise(0.25, 0.2, 0.08, 0.5)),
                        DetectorSpec::new("large", noise(0.1, 0.1, 0.04, 0.6)).with_override(
                            Regime {
                                hard: Some(true),
                                ..Regime::default()
                            },
                            noise(0.3, 0.3, 0.08, 0.5),
                        ),
                    ],
                    confidence_link: None,
                },
            },
            Preset::ConfidenceLinked => SyntheticConfig {
                num_images: 5000,
                num_classes: 10,
                scene,
                models: ModelSpecs::Detection {
                    detectors: vec![DetectorSpec::new("det", NoiseProfile::PERFECT)],
                    confidence_link: Some(ConfidenceLink {
                        intercept: 0.2,
                        slope: 0.6,
                        noise_sd: 0.05,
                        detections: (5, 15),
                        confidence_spread: 0.05,
                    }),
                },
            },
            Preset::Offload => {
                let hard = Regime {
                    hard: Some(true),
                    ..Regime::default()
                };
                let crowded = Regime {
                    min_objects: Some(4),
                    ..Regime::default()
                };
                let hard_noise = noise(0.4, 0.6, 0.1, 0.9);
                SyntheticConfig {
                    num_images: 4000,
                    num_classes: 10,
                    scene: SceneSpec {
                        objects_per_image: (1, 8),
                        hard_fraction: 0.2,
                        ..scene
                    },
                    models: ModelSpecs::Detection {
                        detectors: vec![
                            DetectorSpec::new("mobile", noise(0.05, 0.05, 0.03, 0.7))
                                .with_override(hard.clone(), hard_noise)
                                .with_override(crowded, noise(0.45, 0.02, 0.03, 0.7)),
                            DetectorSpec::new("cloud", noise(0.03, 0.03, 0.02, 0.7)).with_override(hard, hard_noise),
                        ],
                        confidence_link: None,
                    },
                }
            }
            Preset::Selection => {
                let good = noise(0.02, 0.02, 0.02, 0.7);
                let bad = noise(0.35, 0.3, 0.06, 0.7);
                let quadrant = |high_entropy: bool, crowded: bool| Regime {
                    min_objects: crowded.then_some(4),
                    max_objects: (!crowded).then_some(3),
                    entropy_above: high_entropy.then_some(6.0),
                    entropy_below: (!high_entropy).then_some(6.0),
                    ..Regime::default()
                };
                let detectors = [(false, false), (false, true), (true, false), (true, true)]
                    .iter()
                    .enumerate()
                    .map(|(k, &(e, c))| DetectorSpec::new(&format!("m{k}"), bad).with_override(quadrant(e, c), good))
                    .collect();
                SyntheticConfig {
                    num_images: 3000,
                    num_classes: 10,
                    scene: SceneSpec {
                        objects_per_image: (1, 7),
                        ..scene
                    },
                    models: ModelSpecs::Detection {
                        detectors,
                        confidence_link: None,
                    },
                }
            }
            Preset::FeatureLinked => {
                let num_classes = 20;
                let mut det = DetectorSpec::new("det", noise(0.1, 0.35, 0.03, 0.05));
                det.fp_class_weights = (0..num_classes).map(|c| if c < 4 { 12.0 } else { 1.0 }).collect();
                det.fp_border_prob = Some(0.9);
                SyntheticConfig {
                    num_images: 4000,
                    num_classes,
                    scene: SceneSpec {
                        objects_per_image: (1, 8),
                        ..scene
                    },
                    models: ModelSpecs::Detection {
                        detectors: vec![det],
                        confidence_link: None,
                    },
                }
            }
            Preset::Classification => SyntheticConfig {
                num_images: 3000,
                num_classes: 10,
                scene,
                models: ModelSpecs::Classification {
                    classifiers: vec![ClassifierSpec::calibrated("resnet", 3.0)],
                },
            },
            Preset::Shift => SyntheticConfig {
                num_images: 40000,
                num_classes: 10,
                scene: SceneSpec {
                    hard_fraction: 0.4,
                    ..scene
                },
                models: ModelSpecs::Classification {
                    classifiers: vec![ClassifierSpec {
                        model_id: "resnet".into(),
                        signal: 4.0,
                        hard_signal: 0.5,
                        noise_sd: 1.0,
                        logit_scale: 1.0,
                        hard_logit_scale: 8.0,
                    }],
                },
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_images == 0 {
            return bad("num_images must be positive");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        let s = &self.scene;
        if s.objects_per_image.0 > s.objects_per_image.1 || s.objects_per_image.1 > GRID * GRID {
            return bad("objects_per_image must be an ordered range within 0..=25");
        }
        if !(s.box_side.0 > 0.0 && s.box_side.0 <= s.box_side.1 && s.box_side.1 <= CELL) {
            return bad("box_side must be an ordered range within (0, 0.2]");
        }
        if s.width.0 == 0 || s.width.0 > s.width.1 || s.height.0 == 0 || s.height.0 > s.height.1 {
            return bad("image dimensions must be positive ordered ranges");
        }
        if !(0.0..=1.0).contains(&s.hard_fraction) {
            return bad("hard_fraction must lie in [0,1]");
        }
        if s.entropy_range.0 > s.entropy_range.1 || s.corners_noise < 0.0 {
            return bad("entropy_range must be ordered and corners_noise nonnegative");
        }
        match &self.models {
            ModelSpecs::Detection {
                detectors,
                confidence_link,
            } => {
                if detectors.is_empty() {
                    return bad("at least one detector is required");
                }
                for d in detectors {
                    for n in std::iter::once(&d.noise).chain(d.overrides.iter().map(|o| &o.noise)) {
                        let probs = [n.miss_rate, n.fp_rate, n.confidence_quality];
                        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || n.jitter < 0.0 {
                            return bad("noise rates must lie in [0,1] and jitter be nonnegative");
                        }
                    }
                    if !d.class_miss.is_empty() && d.class_miss.len() != self.num_classes {
                        return bad("class_miss needs one entry per class");
                    }
                    if !d.fp_class_weights.is_empty()
                        && (d.fp_class_weights.len() != self.num_classes
                            || d.fp_class_weights.iter().sum::<f64>() <= 0.0)
                    {
                        return bad("fp_class_weights needs one positive-sum entry per class");
                    }
                }
                if let Some(l) = confidence_link {
                    if l.detections.0 == 0 || l.detections.0 > l.detections.1 || l.detections.1 > 15 {
                        return bad("confidence_link detections must be an ordered range within 1..=15");
                    }
                }
            }
            ModelSpecs::Classification { classifiers } => {
                if classifiers.is_empty() {
                    return bad("at least one classifier is required");
                }
                if self.num_classes < 2 {
                    return bad("classification needs at least two classes");
                }
            }
        }
        Ok(())
    }
}

struct SceneLatents {
    num_objects: usize,
    hard: bool,
    entropy: f64,
}

fn unit(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

fn confidence(rng: &mut impl Rng, quality: f64, correct: bool) -> f64 {
    let u = unit(rng);
    let ind = if correct { 1.0 } else { 0.0 };
    (quality * ind + (1.0 - quality) * u).clamp(0.0, 1.0)
}

fn cell_origin(cell: usize) -> (f64, f64) {
    ((cell % GRID) as f64 * CELL, (cell / GRID) as f64 * CELL)
}

fn is_border(cell: usize) -> bool {
    let (r, c) = (cell / GRID, cell % GRID);
    r == 0 || c == 0 || r == GRID - 1 || c == GRID - 1
}

fn box_in_cell(rng: &mut impl Rng, cell: usize, side: (f64, f64)) -> BBox {
    let (x0, y0) = cell_origin(cell);
    let w = side.0 + (side.1 - side.0) * unit(rng);
    let h = side.0 + (side.1 - side.0) * unit(rng);
    let ox = (CELL - w).max(0.0) * unit(rng);
    let oy = (CELL - h).max(0.0) * unit(rng);
    BBox {
        x_min: x0 + ox,
        y_min: y0 + oy,
        x_max: (x0 + ox + w).min(1.0),
        y_max: (y0 + oy + h).min(1.0),
    }
}

fn jittered(rng: &mut impl Rng, b: &BBox, jitter: f64) -> BBox {
    if jitter == 0.0 {
        return *b;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (w, h) = (b.width(), b.height());
    let xs = [
        b.x_min + jitter * w * normal.sample(rng),
        b.x_max + jitter * w * normal.sample(rng),
    ];
    let ys = [
        b.y_min + jitter * h * normal.sample(rng),
        b.y_max + jitter * h * normal.sample(rng),
    ];
    let c = |v: f64| v.clamp(0.0, 1.0);
    BBox {
        x_min: c(xs[0].min(xs[1])),
        y_min: c(ys[0].min(ys[1])),
        x_max: c(xs[0].max(xs[1])),
        y_max: c(ys[0].max(ys[1])),
    }
}

fn weighted_class(rng: &mut impl Rng, weights: &[f64], num_classes: usize) -> u32 {
    if weights.is_empty() {
        return rng.random_range(0..num_classes) as u32;
    }
    let total: f64 = weights.iter().sum();
    let mut x = unit(rng) * total;
    for (c, w) in weights.iter().enumerate() {
        if x < *w {
            return c as u32;
        }
        x -= w;
    }
    (weights.len() - 1) as u32
}

fn f1_of(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

struct DetectorContext<'a> {
    gts: &'a [GroundTruthObject],
    gt_cells: &'a [usize],
    free_cells: &'a [usize],
    scene: &'a SceneLatents,
    side: (f64, f64),
    num_classes: usize,
}

fn detection(
    rng: &mut impl Rng,
    bbox: BBox,
    class_id: u32,
    correct: bool,
    quality: f64,
    with_objectness: bool,
) -> PredictedObject {
    let class_confidence = confidence(rng, quality, correct);
    let objectness = with_objectness.then(|| confidence(rng, quality, correct));
    PredictedObject {
        bbox,
        class_id,
        class_confidence,
        objectness,
    }
}

fn simulate_detector(rng: &mut impl Rng, spec: &DetectorSpec, ctx: &DetectorContext) -> Vec<PredictedObject> {
    let noise = spec.noise_for(ctx.scene);
    let q = noise.confidence_quality;
    let mut dets = Vec::new();
    for (g, &cell) in ctx.gts.iter().zip(ctx.gt_cells) {
        let mut p_miss = noise.miss_rate;
        if let Some(extra) = spec.class_miss.get(g.class_id as usize) {
            p_miss += extra;
        }
        if is_border(cell) {
            p_miss += spec.border_miss;
        }
        if unit(rng) < p_miss.clamp(0.0, 1.0) {
            continue;
        }
        let bbox = jittered(rng, &g.bbox, noise.jitter);
        let correct = iou(&bbox, &g.bbox) >= 0.5;
        dets.push(detection(rng, bbox, g.class_id, correct, q, spec.objectness));
    }
    let mut fp_cells: Vec<usize> = ctx.free_cells.to_vec();
    for _ in 0..ctx.gts.len() {
        if unit(rng) >= noise.fp_rate || fp_cells.is_empty() {
            continue;
        }
        let pool: Vec<usize> = match spec.fp_border_prob {
            Some(p) => {
                let want_border = unit(rng) < p;
                let side: Vec<usize> = fp_cells
                    .iter()
                    .copied()
                    .filter(|c| is_border(*c) == want_border)
                    .collect();
                if side.is_empty() {
                    fp_cells.clone()
                } else {
                    side
                }
            }
            None => fp_cells.clone(),
        };
        let cell = *pool.choose(rng).expect("non-empty pool");
        fp_cells.retain(|c| *c != cell);
        let bbox = box_in_cell(rng, cell, ctx.side);
        let class_id = weighted_class(rng, &spec.fp_class_weights, ctx.num_classes);
        dets.push(detection(rng, bbox, class_id, false, q, spec.objectness));
    }
    dets
}

fn image_features(rng: &mut impl Rng, scene: &SceneLatents, spec: &SceneSpec) -> BTreeMap<String, f64> {
    let blur_center: f64 = if scene.hard { 0.7 } else { 0.3 };
    let blur = (blur_center + 0.15 * Normal::<f64>::new(0.0, 1.0).unwrap().sample(rng)).clamp(0.0, 1.0);
    let corners = (spec.corners_per_object * scene.num_objects as f64 + spec.corners_noise * unit(rng)).round();
    BTreeMap::from([
        ("blur".to_string(), blur),
        ("hist_entropy".to_string(), scene.entropy),
        ("num_corners".to_string(), corners),
    ])
}

/// Generates a corpus from `config`; identical seeds give identical corpora.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = &config.scene;
    let mut records = Vec::with_capacity(config.num_images);
    let width = format!("{}", config.num_images.saturating_sub(1)).len();

    for i in 0..config.num_images {
        let image_id = format!("img-{i:0width$}");
        let img_w = rng.random_range(spec.width.0..=spec.width.1);
        let img_h = rng.random_range(spec.height.0..=spec.height.1);
        let hard = unit(&mut rng) < spec.hard_fraction;
        let entropy = spec.entropy_range.0 + (spec.entropy_range.1 - spec.entropy_range.0) * unit(&mut rng);

        let (ground_truth, outputs, num_objects) = match &config.models {
            ModelSpecs::Detection {
                detectors,
                confidence_link,
            } => {
                let mut cells: Vec<usize> = (0..GRID * GRID).collect();
                cells.shuffle(&mut rng);
                let mut outputs = BTreeMap::new();

                let (gts, gt_cells, linked) = match confidence_link {
                    Some(link) => {
                        let (gts, gt_cells, dets) =
                            linked_scene(&mut rng, link, &cells, spec.box_side, config.num_classes);
                        (gts, gt_cells, Some(dets))
                    }
                    None => {
                        let n = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
                        let gt_cells: Vec<usize> = cells[..n].to_vec();
                        let gts = gt_cells
                            .iter()
                            .map(|&c| GroundTruthObject {
                                bbox: box_in_cell(&mut rng, c, spec.box_side),
                                class_id: rng.random_range(0..config.num_classes) as u32,
                            })
                            .collect::<Vec<_>>();
                        (gts, gt_cells, None)
                    }
                };
                let free_cells: Vec<usize> = (0..GRID * GRID).filter(|c| !gt_cells.contains(c)).collect();
                let scene = SceneLatents {
                    num_objects: gts.len(),
                    hard,
                    entropy,
                };
                let ctx = DetectorContext {
                    gts: &gts,
                    gt_cells: &gt_cells,
                    free_cells: &free_cells,
                    scene: &scene,
                    side: spec.box_side,
                    num_classes: config.num_classes,
                };
                let mut linked = linked;
                for (k, d) in detectors.iter().enumerate() {
                    let dets = match (k, linked.take()) {
                        (0, Some(dets)) => dets,
                        _ => simulate_detector(&mut rng, d, &ctx),
                    };
                    outputs.insert(d.model_id.clone(), ModelOutput::Detections(dets));
                }
                let n = gts.len();
                (GroundTruth::Objects(gts), outputs, n)
            }
            ModelSpecs::Classification { classifiers } => {
                let (label, outputs) = classify(&mut rng, classifiers, config.num_classes, hard);
                (GroundTruth::Class(label), outputs, 1)
            }
        };

        let scene = SceneLatents {
            num_objects,
            hard,
            entropy,
        };
        let features = image_features(&mut rng, &scene, spec);
        records.push(ImageRecord {
            image_id,
            width: img_w,
            height: img_h,
            ground_truth,
            outputs,
            raw_image: None,
            image_features: Some(features),
        });
    }

    Ok(Corpus {
        task: config.task(),
        num_classes: config.num_classes,
        records,
        splits: BTreeMap::new(),
    })
}

/// Builds ground truth and first-detector output whose F1 tracks the
/// detector's mean confidence. Returns (gts, their cells, detections).
fn linked_scene(
    rng: &mut ChaCha8Rng,
    link: &ConfidenceLink,
    cells: &[usize],
    side: (f64, f64),
    num_classes: usize,
) -> (Vec<GroundTruthObject>, Vec<usize>, Vec<PredictedObject>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let level = unit(rng);
    let n_det = rng.random_range(link.detections.0..=link.detections.1);
    let confs: Vec<f64> = (0..n_det)
        .map(|_| (level + link.confidence_spread * normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    let mean_conf = confs.iter().sum::<f64>() / n_det as f64;
    let target = (link.intercept + link.slope * mean_conf + link.noise_sd * normal.sample(rng)).clamp(0.0, 1.0);

    // Closest achievable F1 with tp + fp = n_det; ties keep the first found.
    let max_fn = GRID * GRID - n_det;
    let mut best = (0usize, 0usize, f64::INFINITY);
    for tp in 0..=n_det {
        for fn_ in 0..=max_fn {
            let err = (f1_of(tp, n_det - tp, fn_) - target).abs();
            if err < best.2 {
                best = (tp, fn_, err);
            }
        }
    }
    let (tp, fn_, _) = best;
    let n_gt = tp + fn_;
    let gt_cells: Vec<usize> = cells[..n_gt].to_vec();
    let gts: Vec<GroundTruthObject> = gt_cells
        .iter()
        .map(|&c| GroundTruthObject {
            bbox: box_in_cell(rng, c, side),
            class_id: rng.random_range(0..num_classes) as u32,
        })
        .collect();
    let mut dets: Vec<PredictedObject> = gts[..tp]
        .iter()
        .map(|g| PredictedObject {
            bbox: g.bbox,
            class_id: g.class_id,
            class_confidence: 0.0,
            objectness: None,
        })
        .collect();
    for &cell in &cells[n_gt..n_gt + (n_det - tp)] {
        dets.push(PredictedObject {
            bbox: box_in_cell(rng, cell, side),
            class_id: rng.random_range(0..num_classes) as u32,
            class_confidence: 0.0,
            objectness: None,
        });
    }
    dets.shuffle(rng);
    for (d, c) in dets.iter_mut().zip(confs) {
        d.class_confidence = c;
    }
    (gts, gt_cells, dets)
}

fn softmax_sample(rng: &mut impl Rng, logits: &[f64]) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut x = unit(rng) * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn classify(
    rng: &mut ChaCha8Rng,
    classifiers: &[ClassifierSpec],
    num_classes: usize,
    hard: bool,
) -> (usize, BTreeMap<String, ModelOutput>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut outputs = BTreeMap::new();
    let mut label = 0;
    for (k, spec) in classifiers.iter().enumerate() {
        let (signal, scale) = if hard {
            (spec.hard_signal, spec.hard_logit_scale)
        } else {
            (spec.signal, spec.logit_scale)
        };
        let anchor = if k == 0 {
            rng.random_range(0..num_classes)
        } else {
            label
        };
        let z: Vec<f64> = (0..num_classes)
            .map(|c| {
                let bump = if c == anchor { signal } else { 0.0 };
                bump + spec.noise_sd * normal.sample(rng)
            })
            .collect();
        if k == 0 {
            label = softmax_sample(rng, &z);
        }
        let logits: Vec<f64> = z.iter().map(|v| v * scale).collect();
        outputs.insert(
            spec.model_id.clone(),
            ModelOutput::Classification(ClassificationOutput::new(logits, 0)),
        );
    }
    for out in outputs.values_mut() {
        if let ModelOutput::Classification(c) = out {
            c.true_class = label;
        }
    }
    (label, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{image_metrics, match_objects};

    fn per_image(c: &Corpus, model: &str) -> Vec<crate::metrics::ImageMetrics> {
        c.records
            .iter()
            .map(|r| image_metrics(&match_objects(r.detections(model).unwrap(), r.gt_objects(), 0.5)))
            .collect()
    }

    #[test]
    fn noiseless_is_perfect() {
        let c = generate_synthetic(&SyntheticConfig::preset(Preset::Noiseless), 3).unwrap();
        for m in per_image(&c, "model") {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        for r in &c.records {
            assert!(r.detections("model").unwrap().iter().all(|d| d.class_confidence == 1.0));
        }
    }

    #[test]
    fn full_miss_rate_zeroes_recall() {
        let mut cfg = SyntheticConfig::preset(Preset::Noiseless);
        if let ModelSpecs::Detection { detectors, .. } = &mut cfg.models {
            detectors[0].noise.miss_rate = 1.0;
        }
        let c = generate_synthetic(&cfg, 3).unwrap();
        for m in per_image(&c, "model") {
            assert_eq!(m.recall, 0.0);
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        for p in Preset::ALL {
            let mut cfg = SyntheticConfig::preset(p);
            cfg.num_images = 40;
            let a = generate_synthetic(&cfg, 9).unwrap().to_jsonl_string();
            let b = generate_synthetic(&cfg, 9).unwrap().to_jsonl_string();
            assert_eq!(a, b, "{}", p.name());
            let other = generate_synthetic(&cfg, 10).unwrap().to_jsonl_string();
            assert_ne!(a, other, "{}", p.name());
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = SyntheticConfig::preset(Preset::Basic);
        cfg.num_images = 0;
        assert!(generate_synthetic(&cfg, 0).is_err());
        let mut cfg = SyntheticConfig::preset(Preset::Basic);
        cfg.num_classes = 0;
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn ground_truth_boxes_are_disjoint() {
        let c = generate_synthetic(&SyntheticConfig::preset(Preset::Basic), 4).unwrap();
        for r in &c.records {
            let g = r.gt_objects();
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    assert_eq!(iou(&g[i].bbox, &g[j].bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn linked_scene_tracks_mean_confidence() {
        let mut cfg = SyntheticConfig::preset(Preset::ConfidenceLinked);
        cfg.num_images = 500;
        let c = generate_synthetic(&cfg, 2).unwrap();
        let metrics = per_image(&c, "det");
        let mut sq = 0.0;
        for (r, m) in c.records.iter().zip(&metrics) {
            let d = r.detections("det").unwrap();
            let mean = d.iter().map(|p| p.class_confidence).sum::<f64>() / d.len() as f64;
            sq += (m.f1 - (0.2 + 0.6 * mean)).powi(2);
        }
        let rmse = (sq / metrics.len() as f64).sqrt();
        // Noise σ = 0.05 plus F1 quantisation.
        assert!(rmse < 0.07, "rmse {rmse}");
    }

    #[test]
    fn calibrated_classifier_accuracy_matches_confidence() {
        let mut cfg = SyntheticConfig::preset(Preset::Classification);
        cfg.num_images = 4000;
        let c = generate_synthetic(&cfg, 8).unwrap();
        let (mut acc, mut conf) = (0.0, 0.0);
        for r in &c.records {
            let out = r.classification("resnet").unwrap();
            acc += out.is_correct() as u8 as f64;
            let max = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = out.logits.iter().map(|v| (v - max).exp()).sum();
            conf += 1.0 / z;
        }
        let n = c.len() as f64;
        assert!((acc / n - conf / n).abs() < 0.03, "acc {} conf {}", acc / n, conf / n);
    }
}
