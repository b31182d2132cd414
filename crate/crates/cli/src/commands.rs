use std::str::FromStr;

use anyhow::{Context, Result};
use posthoc::calibration::{bin_sensitivity, CalibrationReport, ReliabilityBins};
use posthoc::data::synth::{generate_synthetic, Preset, SyntheticConfig};
use posthoc::data::{argmax, resample_shift, Corpus, ImageRecord, IngestOptions, Split, Task};
use posthoc::estimators::EstimatorKind;
use posthoc::features::Profile;
use posthoc::metrics::{image_metrics, match_objects, Metric};
use posthoc::usecases::{
    self, ModelSelector, OffloadPredictor, PosthocModel, SampleComplexityConfig, ShiftConfig, TrainSpec,
};
use posthoc::Error;
use serde_json::json;

use crate::output::{num, opt_num, Run};
use crate::{
    CorpusArgs, EstimatorArgs, EvalArgs, HyperArgs, OffloadArgs, PredictArgs, ReportArgs, SampleComplexityArgs,
    SelectArgs, ShiftArgs, SplitArgs, SynthArgs, TaskArg, TrainArgs,
};

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| config_err(format!("bad {what} value `{v}` in `{s}`")))
        })
        .collect()
}

/// Classification records carry logits; anything else is read as detection.
fn sniff_task(bytes: &[u8]) -> Task {
    let first = bytes
        .split(|b| *b == b'\n')
        .find(|l| !l.iter().all(u8::is_ascii_whitespace));
    let value: Option<serde_json::Value> = first.and_then(|l| serde_json::from_slice(l).ok());
    let has_logits = value
        .as_ref()
        .and_then(|v| v.get("models"))
        .and_then(|m| m.as_object())
        .is_some_and(|m| m.values().any(|out| out.get("logits").is_some()));
    if has_logits {
        Task::Classification
    } else {
        Task::Detection
    }
}

fn load_corpus(run: &mut Run, args: &CorpusArgs) -> Result<Corpus> {
    let bytes = run.read_input(&args.input)?;
    let task = match args.task {
        Some(TaskArg::Detection) => Task::Detection,
        Some(TaskArg::Classification) => Task::Classification,
        None => sniff_task(&bytes),
    };
    let mut opts = IngestOptions::new(task);
    opts.num_classes = args.num_classes;
    Corpus::from_reader(&bytes[..], &opts).with_context(|| format!("reading {}", args.input.display()))
}

fn records(corpus: &Corpus, split: Option<Split>, default: Split) -> Result<Vec<&ImageRecord>> {
    match split {
        Some(s) => Ok(corpus.require_split(s)?),
        None if corpus.is_split() => Ok(corpus.require_split(default)?),
        None => Ok(corpus.records.iter().collect()),
    }
}

fn apply_hyper(spec: &mut TrainSpec, h: &HyperArgs) {
    spec.boost.num_rounds = h.rounds;
    spec.boost.max_depth = h.depth;
    spec.boost.subsample = h.subsample;
    spec.boost.learning_rate = h.learning_rate;
    spec.boost.min_samples_leaf = h.min_leaf;
    spec.mlp.epochs = h.epochs;
    spec.mlp.learning_rate = h.mlp_learning_rate;
    spec.mlp.batch_size = h.batch_size;
    spec.vector.iterations = h.vector_iterations;
}

fn train_spec(est: &EstimatorArgs, task: Task) -> TrainSpec {
    let metric = est.metric.unwrap_or(match task {
        Task::Detection => Metric::F1,
        Task::Classification => Metric::Accuracy,
    });
    let mut spec = TrainSpec::new(metric, est.profile.clone(), est.estimator, est.seed);
    spec.pipeline.iou_threshold = est.iou;
    apply_hyper(&mut spec, &est.hyper);
    spec
}

fn bin_rows(bins: &ReliabilityBins) -> Vec<Vec<String>> {
    bins.bins
        .iter()
        .map(|b| {
            vec![
                num(b.lo),
                num(b.hi),
                b.count.to_string(),
                opt_num(b.mean_pred),
                opt_num(b.mean_true),
            ]
        })
        .collect()
}

const BIN_HEADER: [&str; 5] = ["bin_lo", "bin_hi", "count", "mean_pred", "mean_true"];

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "synth", a)?;
    let preset: Preset = a.preset.parse()?;
    let mut cfg = SyntheticConfig::preset(preset);
    if let Some(n) = a.num_images {
        cfg.num_images = n;
    }
    let corpus = generate_synthetic(&cfg, a.seed)?;
    run.resolved(&json!({ "synthetic": cfg, "num_classes": corpus.num_classes }))?;
    run.write("corpus.jsonl", corpus.to_jsonl_string().as_bytes())?;
    run.finish()
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "split", a)?;
    let mut corpus = load_corpus(&mut run, &a.corpus)?;
    let f: Vec<f64> = parse_list(&a.fractions, "fraction")?;
    let [fc, posthoc, test] = f[..] else {
        return Err(config_err(format!("expected three fractions, got `{}`", a.fractions)));
    };
    match (&a.keep_classes, &a.frequencies) {
        (Some(k), Some(q)) => {
            let keep: Vec<usize> = parse_list(k, "class")?;
            let freq: Vec<f64> = parse_list(q, "frequency")?;
            corpus = resample_shift(&corpus, &keep, &freq, a.seed)?;
        }
        (None, None) => {}
        _ => return Err(config_err("--keep-classes and --frequencies go together")),
    }
    let corpus = posthoc::data::split(&corpus, (fc, posthoc, test), a.seed)?;
    let counts: serde_json::Map<String, serde_json::Value> = Split::ALL
        .iter()
        .map(|s| (s.name().to_string(), json!(corpus.records_in(*s).len())))
        .collect();
    run.resolved(&json!({ "task": corpus.task, "num_classes": corpus.num_classes, "counts": counts }))?;
    run.write("corpus.jsonl", corpus.to_jsonl_string().as_bytes())?;
    run.finish()
}

pub fn eval_metrics(a: &EvalArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "eval-metrics", a)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    corpus.require_model(&a.model)?;
    let recs: Vec<&ImageRecord> = match a.split {
        Some(s) => corpus.require_split(s)?,
        None => corpus.records.iter().collect(),
    };
    let n = recs.len().max(1) as f64;
    match corpus.task {
        Task::Detection => {
            let mut rows = Vec::with_capacity(recs.len());
            let mut sums = [0.0; 3];
            for r in &recs {
                let m = image_metrics(&match_objects(r.detections(&a.model)?, r.gt_objects(), a.iou));
                sums[0] += m.precision;
                sums[1] += m.recall;
                sums[2] += m.f1;
                rows.push(vec![
                    r.image_id.clone(),
                    m.tp.to_string(),
                    m.fp.to_string(),
                    m.fn_.to_string(),
                    num(m.precision),
                    num(m.recall),
                    num(m.f1),
                ]);
            }
            run.write_csv(
                "metrics.csv",
                &["image_id", "tp", "fp", "fn", "precision", "recall", "f1"],
                &rows,
            )?;
            run.write_json(
                "summary.json",
                &json!({ "images": recs.len(), "precision": sums[0] / n, "recall": sums[1] / n, "f1": sums[2] / n }),
            )?;
        }
        Task::Classification => {
            let mut rows = Vec::with_capacity(recs.len());
            let mut correct = 0usize;
            for r in &recs {
                let c = r.classification(&a.model)?;
                let pred = argmax(&c.logits);
                correct += usize::from(c.is_correct());
                rows.push(vec![
                    r.image_id.clone(),
                    pred.to_string(),
                    c.true_class.to_string(),
                    u8::from(c.is_correct()).to_string(),
                ]);
            }
            run.write_csv(
                "metrics.csv",
                &["image_id", "predicted", "true_class", "correct"],
                &rows,
            )?;
            run.write_json(
                "summary.json",
                &json!({ "images": recs.len(), "accuracy": correct as f64 / n }),
            )?;
        }
    }
    run.finish()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "train", a)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let spec = train_spec(&a.est, corpus.task);
    run.resolved(&spec)?;
    let recs = records(&corpus, a.split, Split::TrainPosthoc)?;
    let model = PosthocModel::train(&recs, corpus.task, &a.model, corpus.num_classes, &spec)?;
    log::info!("trained {} on {} records", spec.estimator.name(), recs.len());
    run.write("model.json", model.to_json_string().as_bytes())?;
    run.finish()
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "predict", a)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let bytes = run.read_input(&a.model_file)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::ModelFile("model file is not UTF-8".into()))?;
    let model = PosthocModel::from_json_str(&text)?;
    let recs = records(&corpus, a.split, Split::Test)?;
    let pred = model.predict(&recs)?;
    let truth = model.truth(&recs)?;
    let rows: Vec<Vec<String>> = recs
        .iter()
        .zip(pred.iter().zip(&truth))
        .map(|(r, (p, t))| vec![r.image_id.clone(), num(*p), num(*t)])
        .collect();
    run.write_csv("predictions.csv", &["image_id", "predicted", "true"], &rows)?;
    run.finish()
}

fn read_predictions(bytes: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr
        .headers()
        .map_err(|e| Error::InvalidInput(format!("predictions header: {e}")))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("predictions file has no `{name}` column")))
    };
    let (pi, ti) = (col("predicted")?, col("true")?);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.trim().parse().map_err(|_| {
                Error::Parse {
                    line,
                    message: format!("`{s}` is not a number"),
                }
                .into()
            })
        };
        pred.push(field(pi)?);
        truth.push(field(ti)?);
    }
    Ok((pred, truth))
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "report", a)?;
    let bytes = run.read_input(&a.input)?;
    let (pred, truth) = read_predictions(&bytes)?;
    let rep = CalibrationReport::compute(&pred, &truth, a.bins)?;
    run.write_json(
        "report.json",
        &json!({ "n": rep.n, "bins": a.bins, "ece": rep.ece, "spearman": rep.spearman, "r2": rep.r2 }),
    )?;
    run.write_csv("bins.csv", &BIN_HEADER, &bin_rows(&rep.bins))?;
    if let Some(s) = &a.sensitivity {
        let counts: Vec<usize> = parse_list(s, "bin count")?;
        let rows: Vec<Vec<String>> = bin_sensitivity(&pred, &truth, &counts)?
            .into_iter()
            .map(|(j, e)| vec![j.to_string(), num(e)])
            .collect();
        run.write_csv("sensitivity.csv", &["bins", "ece"], &rows)?;
    }
    run.finish()
}

pub fn offload_sweep(a: &OffloadArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "offload-sweep", a)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let servers: Vec<String> = parse_list(&a.server, "server")?;
    let rhos: Vec<f64> = parse_list(&a.rho, "rho")?;
    let spec = train_spec(&a.est, corpus.task);
    run.resolved(&json!({ "spec": spec, "servers": servers, "rhos": rhos, "gap_guard": !a.no_gap_guard }))?;
    let train = corpus.require_split(Split::TrainPosthoc)?;
    let validation = corpus.require_split(Split::TrainFc)?;
    let test = corpus.require_split(Split::Test)?;
    let predictor = OffloadPredictor::train(
        &train,
        &validation,
        corpus.task,
        &a.client,
        &servers,
        corpus.num_classes,
        &spec,
    )?;
    let points = predictor.sweep(&validation, &test, &rhos, !a.no_gap_guard)?;
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                num(p.rho),
                num(p.threshold),
                num(p.fraction),
                num(p.mean_policy),
                num(p.mean_confidence),
                num(p.mean_oracle),
            ]
        })
        .collect();
    run.write_csv(
        "sweep.csv",
        &[
            "rho",
            "threshold",
            "fraction",
            "mean_policy",
            "mean_confidence",
            "mean_oracle",
        ],
        &rows,
    )?;
    run.finish()
}

pub fn select_model(a: &SelectArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "select-model", a)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let ids: Vec<String> = parse_list(&a.models, "model")?;
    let spec = train_spec(&a.est, corpus.task);
    run.resolved(&json!({ "spec": spec, "models": ids }))?;
    let train = corpus.require_split(Split::TrainPosthoc)?;
    let test = corpus.require_split(Split::Test)?;
    let selector = ModelSelector::train(&train, corpus.task, &ids, corpus.num_classes, &spec)?;
    let r = selector.evaluate(&test)?;

    let mut rows: Vec<Vec<String>> = ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            vec![
                id.clone(),
                num(r.model_means[k]),
                r.histogram[k].to_string(),
                r.oracle_histogram[k].to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "combined".into(),
        num(r.combined_mean),
        String::new(),
        String::new(),
    ]);
    rows.push(vec!["oracle".into(), num(r.oracle_mean), String::new(), String::new()]);
    run.write_csv("selection.csv", &["model_id", "mean", "chosen", "oracle_best"], &rows)?;

    let mut header = vec!["image_id".to_string(), "chosen".into(), "oracle".into()];
    header.extend(ids.iter().cloned());
    let assignments: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|row| {
            let mut v = vec![row.image_id.clone(), ids[row.chosen].clone(), ids[row.oracle].clone()];
            v.extend(row.metrics.iter().map(|m| num(*m)));
            v
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    run.write_csv("assignments.csv", &header, &assignments)?;
    run.write_json(
        "summary.json",
        &json!({
            "images": r.rows.len(),
            "best_individual_mean": r.best_individual_mean(),
            "combined_mean": r.combined_mean,
            "oracle_mean": r.oracle_mean,
            "selection_accuracy": r.accuracy,
        }),
    )?;
    run.finish()
}

pub fn shift(a: &ShiftArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "shift", a)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let mut cfg = ShiftConfig::with_seed(a.seed);
    cfg.bins = a.bins;
    let mut spec = TrainSpec::new(Metric::Accuracy, Profile::Full, EstimatorKind::Boost, a.seed);
    apply_hyper(&mut spec, &a.hyper);
    cfg.boost = spec.boost;
    cfg.mlp = spec.mlp;
    cfg.vector = spec.vector;
    run.resolved(&cfg)?;
    let r = usecases::dataset_shift_pipeline(&corpus, &a.model, &cfg)?;
    run.write_json("report.json", &r)?;
    for (name, rep) in [("confidence", &r.confidence), ("boost", &r.boost), ("mlp", &r.mlp)] {
        run.write_csv(&format!("bins_{name}.csv"), &BIN_HEADER, &bin_rows(&rep.bins))?;
    }
    let outcomes: Vec<Vec<String>> = r
        .histogram
        .iter()
        .map(|b| vec![num(b.lo), num(b.hi), b.correct.to_string(), b.incorrect.to_string()])
        .collect();
    run.write_csv("outcomes.csv", &["bin_lo", "bin_hi", "correct", "incorrect"], &outcomes)?;
    run.finish()
}

pub fn sample_complexity(a: &SampleComplexityArgs) -> Result<()> {
    let mut run = Run::new(&a.out.out_dir, "sample-complexity", a)?;
    let corpus = load_corpus(&mut run, &a.corpus)?;
    let cfg = SampleComplexityConfig {
        sizes: parse_list(&a.sizes, "size")?,
        repeats: a.repeats,
        bins: a.bins,
        spec: train_spec(&a.est, corpus.task),
        seed: a.est.seed,
    };
    run.resolved(&cfg)?;
    let rows: Vec<Vec<String>> = usecases::sample_complexity(&corpus, &a.model, &cfg)?
        .into_iter()
        .map(|r| vec![r.size.to_string(), r.variant, num(r.ece), opt_num(r.spearman)])
        .collect();
    run.write_csv("sample_complexity.csv", &["size", "variant", "ece", "spearman"], &rows)?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_is_sniffed_from_the_first_record() {
        let cls = br#"
{"image_id":"a","width":1,"height":1,"models":{"m":{"logits":[0,1],"true_class":1}}}"#;
        let det = br#"{"image_id":"a","width":1,"height":1,"models":{"m":{"dets":[]}}}"#;
        assert_eq!(sniff_task(cls), Task::Classification);
        assert_eq!(sniff_task(det), Task::Detection);
        assert_eq!(sniff_task(b"not json"), Task::Detection);
    }

    #[test]
    fn lists_parse_or_fail_as_validation_errors() {
        assert_eq!(parse_list::<f64>("0.1, 0.2", "x").unwrap(), vec![0.1, 0.2]);
        let err = parse_list::<usize>("1,a", "size").unwrap_err();
        assert!(err.downcast_ref::<Error>().unwrap().is_validation());
    }

    #[test]
    fn predictions_need_both_columns() {
        let (p, t) = read_predictions(b"image_id,predicted,true\na,0.5,1\nb,0.25,0\n").unwrap();
        assert_eq!((p, t), (vec![0.5, 0.25], vec![1.0, 0.0]));
        assert!(read_predictions(b"image_id,predicted\na,0.5\n").is_err());
        assert!(read_predictions(b"predicted,true\nx,1\n").is_err());
    }
}
