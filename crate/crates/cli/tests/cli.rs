use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cxrfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxrfuse"))
        .args(args)
        .env_remove("CXRFUSE_SEED")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.push("--json");
    let out = cxrfuse(&all);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic site, labelled cohort and split files in `dir`.
fn prepare(dir: &Path, n_patients: &str) -> Vec<String> {
    ok_json(&["synth", "--output", p(&dir.join("site")), "--n-patients", n_patients, "--seed", "3"]);
    ok_json(&[
        "label",
        "--diagnoses",
        p(&dir.join("site/diagnoses.csv")),
        "--output",
        p(&dir.join("cohort.csv")),
    ]);
    ok_json(&["split", "--cohort", p(&dir.join("cohort.csv")), "--output", p(&dir.join("splits.csv"))]);
    let mut preds: Vec<String> = fs::read_dir(dir.join("site/predictions"))
        .unwrap()
        .map(|e| e.unwrap().path().to_str().unwrap().to_string())
        .collect();
    preds.sort();
    preds
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(cxrfuse(&["--help"]).status.code(), Some(0));
    for sub in ["preprocess", "label", "split", "weights", "chisq", "fuse", "eval", "fairness", "permtest", "synth", "report", "run"] {
        assert_eq!(cxrfuse(&[sub, "--help"]).status.code(), Some(0), "{sub}");
    }
    assert_eq!(cxrfuse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cxrfuse(&["chisq"]).status.code(), Some(1));
    let bad = cxrfuse(&["fuse", "--strategy", "bag:median", "--cohort", "c", "--splits", "s", "--pred", "x", "--output", "o"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn chisq_reference_table() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.csv");
    fs::write(&t, "20,10\n10,20\n").unwrap();
    let v = ok_json(&["chisq", "--table", p(&t)]);
    assert!((v["statistic"].as_f64().unwrap() - 20.0 / 3.0).abs() < 1e-12);
    assert_eq!(v["dof"], 1);
    assert!((v["p_value"].as_f64().unwrap() - 0.009_823_274_507_519_248).abs() < 1e-9);

    fs::write(&t, "5,5\n0,0\n").unwrap();
    let out = cxrfuse(&["chisq", "--table", p(&t), "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "argument");
}

#[test]
fn missing_file_is_data_exit() {
    let out = cxrfuse(&["eval", "--cohort", "/nonexistent/c.csv", "--pred", "/nonexistent/p.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/c.csv"));
}

#[test]
fn single_class_eval_is_computation_exit() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.csv");
    let pr = dir.path().join("p.csv");
    fs::write(&c, "patient_id,image_id,label,site\np1,i1,0,s\np2,i2,0,s\n").unwrap();
    fs::write(&pr, "image_id,score\ni1,0.2\ni2,0.4\n").unwrap();
    let out = cxrfuse(&["eval", "--cohort", p(&c), "--pred", p(&pr), "--bootstrap", "10"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn preprocess_resizes_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.pgm");
    let mut bytes = b"P5\n4 2\n255\n".to_vec();
    bytes.extend([0u8, 50, 100, 150, 200, 250, 25, 75]);
    fs::write(&input, bytes).unwrap();
    let out = dir.path().join("out.pgm");
    let v = ok_json(&["preprocess", "--input", p(&input), "--output", p(&out), "--size", "8"]);
    assert_eq!(v["output_size"], serde_json::json!([8, 8]));
    assert!(fs::read(&out).unwrap().starts_with(b"P5\n8 8\n255\n"));
}

#[test]
fn step_by_step_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let preds = prepare(d, "300");
    assert_eq!(preds.len(), 4);
    let cohort = p(&d.join("cohort.csv")).to_string();
    let splits = p(&d.join("splits.csv")).to_string();

    let w = ok_json(&["weights", "--cohort", &cohort]);
    let (pos, neg) = (w["positives"].as_f64().unwrap(), w["negatives"].as_f64().unwrap());
    let identity = pos * w["w_pos"].as_f64().unwrap() + neg * w["w_neg"].as_f64().unwrap();
    assert!((identity - (pos + neg)).abs() < 1e-9);

    let mut args = vec!["weights", "--pred"];
    args.extend(preds.iter().map(String::as_str));
    let dw = ok_json(&args);
    let total: f64 = dw["weights"]["weights"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);

    for strategy in ["bag:unweighted", "bag:weighted", "stack:logistic", "stack:gbdt"] {
        let out = d.join(format!("{}.csv", strategy.replace(':', "_")));
        let mut args = vec!["fuse", "--strategy", strategy, "--cohort", &cohort, "--splits", &splits, "--output", p(&out), "--pred"];
        args.extend(preds.iter().map(String::as_str));
        let v = ok_json(&args);
        assert!(v["rows"].as_u64().unwrap() > 0);
        let e = ok_json(&["eval", "--cohort", &cohort, "--pred", p(&out), "--bootstrap", "100"]);
        let auc = &e["report"]["auc"];
        assert!(auc["lo"].as_f64().unwrap() <= auc["hi"].as_f64().unwrap());
        assert!(auc["full_sample"].as_f64().unwrap() > 0.6, "{strategy}: {auc}");
    }

    let mut args = vec!["fuse", "--strategy", "data:multisite", "--cohort", &cohort, "--splits", &splits, "--output", "x.csv", "--pred"];
    args.extend(preds.iter().map(String::as_str));
    assert_eq!(cxrfuse(&args).status.code(), Some(1));

    let mut args = vec!["fairness", "--cohort", &cohort, "--demographics"];
    let demo = d.join("site/demographics.csv");
    args.push(p(&demo));
    args.push("--pred");
    args.extend(preds.iter().map(String::as_str));
    let f = ok_json(&args);
    assert_eq!(f["rows"].as_array().unwrap().len(), 4);
    assert_eq!(f["axes"].as_array().unwrap().len(), 3);
}

#[test]
fn permtest_runs_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let preds = prepare(d, "600");
    let cohort = p(&d.join("cohort.csv")).to_string();
    let splits = p(&d.join("splits.csv")).to_string();
    let mut args = vec!["permtest", "--cohort", &cohort, "--splits", &splits, "--bootstrap", "50", "--pred"];
    args.extend(preds.iter().map(String::as_str));
    let v = ok_json(&args);
    assert_eq!(v["permuted"], true);
    let auc = v["report"]["auc"]["full_sample"].as_f64().unwrap();
    assert!((0.35..0.65).contains(&auc), "{auc}");
}

const SMALL_RUN: &str = "\
[run]
bootstrap = 50
[synth]
n_patients = 400
[second_site]
n_patients = 300
[train]
forest_trees = 20
gbdt_rounds = 20
max_epochs = 10
";

#[test]
fn run_is_deterministic_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.ini");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let a = ok_json(&["run", "--config", p(&cfg), "--output", p(&d.join("a")), "--seed", "5"]);
    ok_json(&["run", "--config", p(&cfg), "--output", p(&d.join("b")), "--seed", "5"]);
    assert_eq!(a["rows"].as_array().unwrap().len(), 13);
    for f in ["metrics.csv", "metrics.json", "metrics.md", "fairness.csv", "fairness.json", "run.json", "dendrogram.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let r = cxrfuse(&["report", "--input", p(&d.join("a"))]);
    assert!(r.status.success());
    let text = String::from_utf8(r.stdout).unwrap();
    assert!(text.contains("| bag:weighted |") && text.contains("| Race-ethnicity |"), "{text}");
}

#[test]
fn env_seed_applies_and_zero_strategies_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.ini");
    fs::write(&cfg, format!("{SMALL_RUN}").replace("bootstrap = 50", "bootstrap = 20\nstrategies = bag:unweighted")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cxrfuse"))
        .args(["run", "--json", "--config", p(&cfg), "--output", p(&d.join("o"))])
        .env("CXRFUSE_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["rows"].as_array().unwrap().len(), 5);

    fs::write(&cfg, "[run]\nstrategies =\n").unwrap();
    let out = cxrfuse(&["run", "--config", p(&cfg), "--output", p(&d.join("z"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&cfg, "[run]\nstrategies = stack:svm\n").unwrap();
    assert_eq!(cxrfuse(&["run", "--config", p(&cfg), "--output", p(&d.join("z"))]).status.code(), Some(1));
}

#[test]
fn run_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(&["synth", "--output", p(&d.join("m")), "--n-patients", "300", "--seed", "1"]);
    ok_json(&["synth", "--output", p(&d.join("e")), "--n-patients", "200", "--seed", "2", "--profile", "emory"]);
    let cfg = "\
[run]
bootstrap = 30
strategies = bag:weighted, stack:logistic, data:multisite, data:multimodal
[data]
source = files
site = mimic
diagnoses = m/diagnoses.csv
demographics = m/demographics.csv
features = m/features.csv
predictions = A=m/predictions/Xception.csv, B=m/predictions/DenseNet121.csv, C=m/predictions/ResNet50V2.csv
[second_site]
site = emory
diagnoses = e/diagnoses.csv
features = e/features.csv
[train]
max_epochs = 5
";
    fs::write(d.join("files.ini"), cfg).unwrap();
    let v = ok_json(&["run", "--config", p(&d.join("files.ini")), "--output", p(&d.join("out"))]);
    let keys: Vec<&str> = v["rows"].as_array().unwrap().iter().map(|r| r["strategy"].as_str().unwrap()).collect();
    assert_eq!(
        keys,
        ["base:A", "base:B", "base:C", "bag:weighted", "stack:logistic", "data:multisite", "data:multimodal"]
    );

    fs::write(d.join("bad.ini"), cfg.replace("diagnoses = e/diagnoses.csv\n", "")).unwrap();
    let out = cxrfuse(&["run", "--config", p(&d.join("bad.ini")), "--output", p(&d.join("x"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}
