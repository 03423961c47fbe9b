use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ipweval");

fn ipweval(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("run ipweval")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(args: &[&str]) {
    let out = ipweval(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small cohort with plenty of measured encounters.
fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("sim");
    let mut args = vec!["simulate", "--n-patients", "20000", "--set", "observed_rate_target=0.2", "--out", p(&out)];
    args.extend(extra);
    ok(&args);
    out.join("cohort.csv")
}

fn auc_of(report: &Value, model: &str) -> f64 {
    report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["model"] == model)
        .unwrap()["auc"]["point"]
        .as_f64()
        .unwrap()
}

#[test]
fn simulate_default_row_count_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&["simulate", "--out", p(&out)]);
    let rows = fs::read_to_string(out.join("cohort.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, 100_000);
    let truth_rows = fs::read_to_string(out.join("truth.csv")).unwrap().lines().count() - 1;
    assert_eq!(truth_rows, rows);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["seed"], 0);
    assert_eq!(m["n_encounters"], 100_000);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["git_describe"].is_string());
    assert!(m["artifacts"]["cohort.csv"].is_string());
}

#[test]
fn simulate_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["simulate", "--n-patients", "5000", "--seed", "11", "--out", p(out)]);
    }
    for f in ["cohort.csv", "truth.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_config_exits_2_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    for bad in ["prevalence_target=1.5", "max_encounters_per_patient=0", "ecg=0.8", "model_auc_targets=ecg:0.3"] {
        let r = ipweval(&["simulate", "--n-patients", "2000", "--set", bad, "--out", p(&out)]);
        assert_eq!(r.status.code(), Some(2), "{bad}: {}", String::from_utf8_lossy(&r.stderr));
        assert!(!out.exists(), "{bad} left files behind");
    }
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# simulator settings\nn_patients = 3000\nseed = 1\n").unwrap();
    let out = dir.path().join("sim");
    ok(&["simulate", "--config", p(&cfg), "--seed", "2", "--out", p(&out)]);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 2);
    assert_eq!(m["config"]["n_patients"], "3000");
    assert_eq!(m["n_encounters"], 3000);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &[]);
    let out = dir.path().join("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["evaluate", "--input", p(&cohort), "--truncate", "0.9,0.1", "--out", p(&out)],
        vec!["evaluate", "--input", p(&cohort), "--levels", "7..1", "--out", p(&out)],
        vec!["evaluate", "--input", p(&cohort), "--rounds", "0", "--out", p(&out)],
        vec!["evaluate", "--input", p(&cohort), "--set", "no_such_key=1", "--out", p(&out)],
        vec!["evaluate", "--out", p(&out)],
        vec!["survival", "--input", p(&cohort), "--out", p(&out)],
    ];
    for args in cases {
        let r = ipweval(&args);
        assert_eq!(r.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
    }
}

#[test]
fn missing_score_column_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &[]);
    let r = ipweval(&["evaluate", "--input", p(&cohort), "--models", "ecg,ppg", "--out", p(&dir.path().join("e"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("score_ppg"));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let missing = dir.path().join("nope.csv");
    assert_eq!(ipweval(&["evaluate", "--input", p(&missing), "--out", p(&out)]).status.code(), Some(3));
    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "patient_id,encounter_id\nP1,E1\n").unwrap();
    assert_eq!(ipweval(&["evaluate", "--input", p(&broken), "--out", p(&out)]).status.code(), Some(3));
}

#[test]
fn evaluate_writes_report_and_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &[]);
    let out = dir.path().join("eval");
    ok(&["evaluate", "--input", p(&cohort), "--rounds", "30", "--levels", "1..7", "--out", p(&out)]);
    let r = json(&out.join("report.json"));
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["command"], "evaluate");
    assert_eq!(r["propensity_source"], "fit");
    assert_eq!(r["matched"].as_array().unwrap().len(), 7);
    // every ordered pair of the three models, for AUC and AUPRC
    assert_eq!(r["pairwise"].as_array().unwrap().len(), 12);
    for m in ["ada", "ecg", "questionnaire"] {
        assert!(out.join(format!("roc_{m}.csv")).exists());
        let prc = fs::read_to_string(out.join(format!("prc_{m}.csv"))).unwrap();
        assert!(prc.starts_with("threshold,recall,precision"));
    }
    let weights = fs::read_to_string(out.join("weights.csv")).unwrap();
    assert!(weights.starts_with("encounter_id,propensity,ipw_weight"));
    assert_eq!(weights.lines().count() - 1, r["n_observed"].as_u64().unwrap() as usize);
}

#[test]
fn evaluate_on_simulator_defaults_recovers_auc() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--out", p(&sim)]);
    let cohort = sim.join("cohort.csv");
    // at a 1% measured rate most propensities fall below the default 0.02 floor
    let fit = dir.path().join("fit");
    ok(&["evaluate", "--input", p(&cohort), "--truncate", "off", "--rounds", "20", "--out", p(&fit)]);
    let truth = dir.path().join("truth");
    ok(&[
        "evaluate",
        "--input",
        p(&cohort),
        "--propensity",
        "truth",
        "--propensity-file",
        p(&sim.join("truth.csv")),
        "--truncate",
        "off",
        "--rounds",
        "20",
        "--out",
        p(&truth),
    ]);
    let a = auc_of(&json(&fit.join("report.json")), "ecg");
    let b = auc_of(&json(&truth.join("report.json")), "ecg");
    assert!((0.78..=0.82).contains(&a), "fit {a}");
    assert!((a - b).abs() < 0.01, "fit {a} truth {b}");
    assert_eq!(json(&truth.join("report.json"))["propensity_source"], "truth");
}

#[test]
fn identical_model_columns_give_p_one() {
    let dir = tempfile::tempdir().unwrap();
    let cohort_path = simulate(dir.path(), &[]);
    let mut cohort = ipweval::io::read_cohort(fs::File::open(&cohort_path).unwrap()).unwrap();
    for e in &mut cohort.encounters {
        let v = e.scores["ecg"];
        e.scores.insert("ecg_copy".into(), v);
    }
    cohort.score_names.push("ecg_copy".into());
    let dup = dir.path().join("dup.csv");
    ipweval::io::write_cohort(&cohort, fs::File::create(&dup).unwrap()).unwrap();
    let out = dir.path().join("eval");
    ok(&["evaluate", "--input", p(&dup), "--models", "ecg,ecg_copy", "--rounds", "25", "--out", p(&out)]);
    let r = json(&out.join("report.json"));
    let tests: Vec<&Value> = r["pairwise"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["model_a"].as_str().unwrap().starts_with("ecg") && t["model_b"].as_str().unwrap().starts_with("ecg"))
        .collect();
    assert!(!tests.is_empty());
    assert!(tests.iter().all(|t| t["pvalue"] == 1.0));
}

#[test]
fn column_source_chains_from_fit_propensity() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &[]);
    let fit = dir.path().join("fit");
    ok(&["fit-propensity", "--input", p(&cohort), "--out", p(&fit)]);
    let model = json(&fit.join("propensity.json"));
    let keys: Vec<&String> = model.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 4);
    let report = json(&fit.join("fit_report.json"));
    assert!(report["calibration"]["ece"].as_f64().unwrap() < 0.03);
    let out = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--input",
        p(&cohort),
        "--propensity",
        "column",
        "--propensity-file",
        p(&fit.join("weights.csv")),
        "--rounds",
        "10",
        "--out",
        p(&out),
    ]);
    assert_eq!(json(&out.join("report.json"))["propensity_source"], "column:propensity");
}

#[test]
fn sensitivity_focal_equal_baseline_crosses_at_grid_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &[]);
    let out = dir.path().join("sens");
    ok(&["sensitivity", "--input", p(&cohort), "--focal", "ada", "--baseline", "ada", "--out", p(&out)]);
    let r = json(&out.join("sensitivity.json"));
    assert_eq!(r["crossing_gamma"], 1.0);
    assert!(r["context"]["unweighted"].is_object());
    assert!(r["context"]["drop_age"].is_object());
    let csv = fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, r["gamma_grid"].as_array().unwrap().len());
}

#[test]
fn sensitivity_without_bracket_reports_null() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &[]);
    let out = dir.path().join("sens");
    let r = ipweval(&["sensitivity", "--input", p(&cohort), "--gamma-grid", "1,1.001", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(0));
    assert!(json(&out.join("sensitivity.json"))["crossing_gamma"].is_null());
}

#[test]
fn survival_reuses_evaluate_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &[]);
    let eval = dir.path().join("eval");
    ok(&["evaluate", "--input", p(&cohort), "--rounds", "10", "--out", p(&eval)]);
    let report = json(&eval.join("report.json"));
    let level5 = report["matched"].as_array().unwrap().iter().find(|r| r["level"] == 5).unwrap();
    let ecg = level5["rows"].as_array().unwrap().iter().find(|r| r["model"] == "ecg").unwrap();
    let out = dir.path().join("surv");
    ok(&["survival", "--input", p(&cohort), "--threshold-from", p(&eval.join("report.json")), "--out", p(&out)]);
    let s = json(&out.join("survival.json"));
    assert_eq!(s["threshold"], ecg["threshold"]);
    assert_eq!(s["groups"].as_array().unwrap().len(), 4);
    let km = fs::read_to_string(out.join("km.csv")).unwrap();
    assert!(km.starts_with("group,time,survival,ci_lo,ci_hi,at_risk,events"));
}

#[test]
fn survival_without_events_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = simulate(dir.path(), &["--set", "onset_rate_high=0", "--set", "onset_rate_low=0"]);
    let out = dir.path().join("surv");
    ok(&["survival", "--input", p(&cohort), "--threshold", "0", "--out", p(&out)]);
    let s = json(&out.join("survival.json"));
    for g in s["groups"].as_array().unwrap() {
        assert_eq!(g["events"], 0);
        assert_eq!(g["incidence"]["estimate"], 0.0);
    }
    for t in s["log_rank"].as_array().unwrap() {
        assert!(t["statistic"].is_null());
        assert!(t["pvalue"].is_null());
    }
    let km = fs::read_to_string(out.join("km.csv")).unwrap();
    for line in km.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("1"));
    }
}
