use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn posthoc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posthoc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = posthoc(dir, args);
    assert!(
        out.status.success(),
        "posthoc {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn noiseless_corpus_scores_perfectly() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &["synth", "--preset", "noiseless", "--num-images", "40", "--out-dir", "s"],
    );
    ok(
        d.path(),
        &[
            "eval-metrics",
            "--input",
            "s/corpus.jsonl",
            "--model",
            "model",
            "--out-dir",
            "m",
        ],
    );
    let rows = read_csv(&d.path().join("m/metrics.csv"));
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r[6] == "1" && r[2] == "0" && r[3] == "0"));
    assert_eq!(json(&d.path().join("m/summary.json"))["f1"], 1.0);
}

#[test]
fn perfect_predictions_report() {
    let d = tempfile::tempdir().unwrap();
    let mut csv = String::from("image_id,predicted,true\n");
    for i in 0..20 {
        let v = i as f64 / 19.0;
        csv.push_str(&format!("img-{i},{v},{v}\n"));
    }
    fs::write(d.path().join("p.csv"), csv).unwrap();
    ok(
        d.path(),
        &["report", "--input", "p.csv", "--sensitivity", "5,20", "--out-dir", "r"],
    );
    let rep = json(&d.path().join("r/report.json"));
    assert_eq!(rep["ece"], 0.0);
    assert_eq!(rep["spearman"], 1.0);
    assert_eq!(rep["r2"], 1.0);
    assert_eq!(read_csv(&d.path().join("r/bins.csv")).len(), 10);
    assert_eq!(
        read_csv(&d.path().join("r/sensitivity.csv")),
        vec![vec!["5", "0"], vec!["20", "0"]]
    );
}

#[test]
fn constant_truth_reports_null_r2() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("p.csv"), "image_id,predicted,true\na,0.2,1\nb,0.7,1\n").unwrap();
    ok(d.path(), &["report", "--input", "p.csv", "--out-dir", "r"]);
    let rep = json(&d.path().join("r/report.json"));
    assert!(rep["r2"].is_null());
    assert!(rep["spearman"].is_null());
}

#[test]
fn trained_model_file_is_self_contained() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "synth",
            "--preset",
            "basic",
            "--num-images",
            "120",
            "--seed",
            "4",
            "--out-dir",
            "s",
        ],
    );
    ok(
        d.path(),
        &[
            "split",
            "--input",
            "s/corpus.jsonl",
            "--fractions",
            "0,0.6,0.4",
            "--out-dir",
            "sp",
        ],
    );
    for est in ["boost", "mlp", "confidence", "temp"] {
        let dir = format!("t-{est}");
        ok(
            d.path(),
            &[
                "train",
                "--input",
                "sp/corpus.jsonl",
                "--model",
                "large",
                "--estimator",
                est,
                "--rounds",
                "20",
                "--epochs",
                "10",
                "--out-dir",
                &dir,
            ],
        );
        // Only the model file and the corpus are needed to predict.
        let model = format!("{dir}/model.json");
        let pred = format!("p-{est}");
        ok(
            d.path(),
            &[
                "predict",
                "--input",
                "sp/corpus.jsonl",
                "--model-file",
                &model,
                "--out-dir",
                &pred,
            ],
        );
        let rows = read_csv(&d.path().join(&pred).join("predictions.csv"));
        assert_eq!(rows.len(), 48);
        assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    }
    let manifest = json(&d.path().join("t-boost/manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["resolved"]["boost"]["num_rounds"], 20);
    assert_eq!(manifest["inputs"][0]["path"], "sp/corpus.jsonl");
    assert_eq!(manifest["outputs"][0]["path"], "model.json");
}

#[test]
fn offload_sweep_and_guard_flag() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "synth",
            "--preset",
            "offload",
            "--num-images",
            "400",
            "--seed",
            "2",
            "--out-dir",
            "s",
        ],
    );
    ok(d.path(), &["split", "--input", "s/corpus.jsonl", "--out-dir", "sp"]);
    let base = [
        "offload-sweep",
        "--input",
        "sp/corpus.jsonl",
        "--client",
        "mobile",
        "--server",
        "cloud",
        "--rounds",
        "30",
    ];
    ok(d.path(), &[&base[..], &["--out-dir", "g"]].concat());
    ok(
        d.path(),
        &[&base[..], &["--no-gap-guard", "--rho", "0,1", "--out-dir", "ng"]].concat(),
    );
    let g = read_csv(&d.path().join("g/sweep.csv"));
    assert_eq!(g.len(), 11);
    assert_eq!(g[0][1], "inf");
    assert_eq!(g[0][2], "0");
    let ng = read_csv(&d.path().join("ng/sweep.csv"));
    // Same threshold at rho = 1; dropping the guard can only add offloads.
    let frac = |rows: &[Vec<String>], i: usize| rows[i][2].parse::<f64>().unwrap();
    assert!(frac(&ng, 1) >= frac(&g, 10));
}

#[test]
fn select_model_writes_means_and_histogram() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "synth",
            "--preset",
            "selection",
            "--num-images",
            "300",
            "--seed",
            "3",
            "--out-dir",
            "s",
        ],
    );
    ok(
        d.path(),
        &[
            "split",
            "--input",
            "s/corpus.jsonl",
            "--fractions",
            "0,0.6,0.4",
            "--out-dir",
            "sp",
        ],
    );
    ok(
        d.path(),
        &[
            "select-model",
            "--input",
            "sp/corpus.jsonl",
            "--models",
            "m0,m1,m2,m3",
            "--rounds",
            "30",
            "--out-dir",
            "sel",
        ],
    );
    let rows = read_csv(&d.path().join("sel/selection.csv"));
    let ids: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ids, ["m0", "m1", "m2", "m3", "combined", "oracle"]);
    let chosen: usize = rows[..4].iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(chosen, 120);
    let s = json(&d.path().join("sel/summary.json"));
    assert!(s["combined_mean"].as_f64().unwrap() <= s["oracle_mean"].as_f64().unwrap());
}

#[test]
fn shift_with_resampling() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "synth",
            "--preset",
            "shift",
            "--num-images",
            "2000",
            "--seed",
            "5",
            "--out-dir",
            "s",
        ],
    );
    ok(
        d.path(),
        &[
            "split",
            "--input",
            "s/corpus.jsonl",
            "--keep-classes",
            "0,1,2",
            "--frequencies",
            "3,3,1",
            "--fractions",
            "0.3,0.4,0.3",
            "--out-dir",
            "sp",
        ],
    );
    let counts = &json(&d.path().join("sp/manifest.json"))["resolved"]["counts"];
    assert!(counts["test"].as_u64().unwrap() > 0);
    ok(
        d.path(),
        &[
            "shift",
            "--input",
            "sp/corpus.jsonl",
            "--model",
            "resnet",
            "--rounds",
            "30",
            "--epochs",
            "20",
            "--out-dir",
            "sh",
        ],
    );
    let rep = json(&d.path().join("sh/report.json"));
    for k in ["confidence", "boost", "mlp"] {
        assert!(rep[k]["ece"].as_f64().unwrap() >= 0.0);
    }
    let outcomes = read_csv(&d.path().join("sh/outcomes.csv"));
    let n: u64 = outcomes
        .iter()
        .map(|r| r[2].parse::<u64>().unwrap() + r[3].parse::<u64>().unwrap())
        .sum();
    assert_eq!(n, counts["test"].as_u64().unwrap());
}

#[test]
fn validation_errors_exit_2_other_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &["synth", "--preset", "basic", "--num-images", "10", "--out-dir", "s"],
    );
    let code = |args: &[&str]| posthoc(d.path(), args).status.code();

    assert_eq!(
        code(&[
            "eval-metrics",
            "--input",
            "s/corpus.jsonl",
            "--model",
            "nope",
            "--out-dir",
            "x"
        ]),
        Some(2)
    );
    assert_eq!(code(&["synth", "--preset", "nope", "--out-dir", "x"]), Some(2));
    assert_eq!(
        code(&[
            "split",
            "--input",
            "s/corpus.jsonl",
            "--fractions",
            "0.5,0.5",
            "--out-dir",
            "x"
        ]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "train",
            "--input",
            "s/corpus.jsonl",
            "--model",
            "small",
            "--metric",
            "accuracy",
            "--out-dir",
            "x"
        ]),
        Some(2)
    );
    assert_eq!(code(&["eval-metrics", "--out-dir", "x"]), Some(2));

    fs::write(d.path().join("bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(
        code(&["eval-metrics", "--input", "bad.jsonl", "--model", "m", "--out-dir", "x"]),
        Some(2)
    );
    fs::write(d.path().join("model.json"), "{}").unwrap();
    assert_eq!(
        code(&[
            "predict",
            "--input",
            "s/corpus.jsonl",
            "--model-file",
            "model.json",
            "--out-dir",
            "x"
        ]),
        Some(2)
    );

    assert_eq!(
        code(&[
            "eval-metrics",
            "--input",
            "missing.jsonl",
            "--model",
            "m",
            "--out-dir",
            "x"
        ]),
        Some(1)
    );
    let err = String::from_utf8(
        posthoc(
            d.path(),
            &[
                "eval-metrics",
                "--input",
                "missing.jsonl",
                "--model",
                "m",
                "--out-dir",
                "x",
            ],
        )
        .stderr,
    )
    .unwrap();
    assert!(err.contains("missing.jsonl"), "{err}");
}

#[test]
fn sample_complexity_rows() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "synth",
            "--preset",
            "feature-linked",
            "--num-images",
            "300",
            "--out-dir",
            "s",
        ],
    );
    ok(
        d.path(),
        &[
            "split",
            "--input",
            "s/corpus.jsonl",
            "--fractions",
            "0,0.5,0.5",
            "--out-dir",
            "sp",
        ],
    );
    ok(
        d.path(),
        &[
            "sample-complexity",
            "--input",
            "sp/corpus.jsonl",
            "--model",
            "det",
            "--sizes",
            "30,100",
            "--repeats",
            "2",
            "--rounds",
            "20",
            "--out-dir",
            "sc",
        ],
    );
    let rows = read_csv(&d.path().join("sc/sample_complexity.csv"));
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(
        keys,
        [
            ("30", "full"),
            ("30", "essential"),
            ("100", "full"),
            ("100", "essential")
        ]
    );
}
