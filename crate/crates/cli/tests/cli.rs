use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtr_cli::commands::FitReport;
use dtr_cli::data::{export_columns, write_dataset_csv};
use dtr_core::gest::{estimate_regime, AdherenceSource, EstimationConfig, EstimationMode, StageModelSpec};
use dtr_core::rng::stream;
use dtr_core::simulation::generate_s1;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dtr-adhere"));
    c.env_remove("DTR_ADHERE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MODELS: [[&str; 4]; 2] = [
    ["1 + X[1]", "1 + X[1]", "1 + X[1]", "1 + X[1] + Astar[1]"],
    ["1 + X[2] + A[1]", "1 + X[1] + X[2] + A[1]", "1 + X[2]", "1 + X[2] + Astar[2]"],
];

fn specs() -> Vec<StageModelSpec> {
    MODELS
        .iter()
        .enumerate()
        .map(|(j, m)| StageModelSpec::parse(j + 1, m[0], m[1], m[2], Some(m[3])).unwrap())
        .collect()
}

/// Writes s1 data and an analysis config for it; returns the config path.
fn setup(dir: &Path, n: usize, mode: &str, adherence: Option<Value>, inference: Value) -> PathBuf {
    let data = generate_s1(n, 1.0, 0.3, &mut stream(11, 0));
    let csv = dir.join("data.csv");
    write_dataset_csv(&data, std::fs::File::create(&csv).unwrap()).unwrap();
    let models: Vec<Value> = MODELS
        .iter()
        .map(|m| json!({"contrast": m[0], "treatment_free": m[1], "assignment": m[2], "adherence": m[3]}))
        .collect();
    let mut config = json!({
        "input": "data.csv",
        "stages": 2,
        "id": "id",
        "outcome": "Y",
        "columns": export_columns(&data),
        "models": models,
        "mode": mode,
        "inference": inference,
    });
    if let Some(a) = adherence {
        config["adherence"] = a;
    }
    let path = dir.join(format!("{mode}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn fitted() -> Option<Value> {
    Some(json!({"source": "fitted"}))
}

fn read_fit(out: &Path) -> FitReport {
    serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap()
}

fn analyze(config: &Path, out: &Path, extra: &[&str]) -> FitReport {
    let o = run(&[&["analyze", p(config), "--out", p(out)][..], extra].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    read_fit(out)
}

#[test]
fn tiny_simulation_reports_its_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["simulate", "--scenario", "s1", "--n", "10", "--reps", "1", "--validation", "0.5", "--seed", "1", "--out", p(&out)]);
    // Ten rows cannot identify the stage-2 models: every estimator fails.
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("too many failed replicates"));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let estimators = summary["estimators"].as_array().unwrap();
    assert_eq!(estimators.len(), 4);
    for e in estimators {
        assert_eq!(e["successes"].as_u64().unwrap() + e["failures"].as_u64().unwrap(), 1);
    }
    let config: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["n"], 10);
    assert_eq!(config["seed"], 1);
    assert_eq!(config, summary["config"]);
    assert!(std::fs::read_to_string(out.join("estimates.csv"))
        .unwrap()
        .starts_with("replicate,estimator,stage,parameter,value\n"));
}

#[test]
fn small_simulation_has_the_documented_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "simulate", "--scenario", "s1", "--n", "300", "--reps", "3", "--validation", "0.5", "--param", "-1",
        "--estimators", "modified-fitted,naive-proxy", "--seed", "1", "--coverage", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 * 2 * 5);
    assert_eq!(lines[1].split(',').take(4).collect::<Vec<_>>(), ["0", "modified-fitted", "1", "1"]);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for e in summary["estimators"].as_array().unwrap() {
        let params = e["parameters"].as_array().unwrap();
        assert_eq!(params.len(), 5);
        assert_eq!(params[4]["truth"], -1.0);
        assert!(params[4]["coverage"].is_number());
    }
}

#[test]
fn unknown_scenario_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(&["simulate", "--scenario", "s9", "--n", "10", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown scenario"));
    assert!(!out.exists());

    let o = run(&["simulate", "--scenario", "s2", "--n", "100", "--param", "1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_configs_exit_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 100, "modified-prescribed", fitted(), json!({}));
    let mut value: Value = serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    let out = dir.path().join("out");

    value["models"][1]["contrast"] = json!("1 + X[3]");
    std::fs::write(&config, value.to_string()).unwrap();
    let o = run(&["analyze", p(&config), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage out of range"), "{}", stderr(&o));
    assert!(!out.exists());

    value["models"][1]["contrast"] = json!("1 + X[2] + A[1]");
    value["columns"][0]["covariates"]["X"] = json!("nope");
    std::fs::write(&config, value.to_string()).unwrap();
    let o = run(&["analyze", p(&config), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("column `nope` not found"), "{}", stderr(&o));
    assert!(!out.exists());

    value["columns"][0]["covariates"]["X"] = json!("X_1");
    std::fs::write(&config, value.to_string()).unwrap();
    let csv = dir.path().join("data.csv");
    let text = std::fs::read_to_string(&csv).unwrap().replacen("\n1,", "\n1,abc", 1);
    std::fs::write(&csv, text).unwrap();
    let o = run(&["analyze", p(&config), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 2, column 2"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn csv_round_trip_reproduces_in_memory_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 2000, "modified-prescribed", fitted(), json!({"method": "wald-sandwich"}));
    let report = analyze(&config, &dir.path().join("out"), &[]);

    let data = generate_s1(2000, 1.0, 0.3, &mut stream(11, 0));
    let direct = estimate_regime(
        &data,
        &EstimationConfig::new(EstimationMode::ModifiedPrescribed, specs()).with_adherence(AdherenceSource::Fitted),
    )
    .unwrap();
    let psi = direct.psi();
    assert_eq!(report.psi.len(), 5);
    for (k, est) in report.psi.iter().enumerate() {
        assert!((est.estimate - psi[k]).abs() < 1e-10, "{k}: {} vs {}", est.estimate, psi[k]);
        let (lo, hi) = (est.lower.unwrap(), est.upper.unwrap());
        assert!(lo < est.estimate && est.estimate < hi);
        assert!((hi - lo - 2.0 * 1.959963984540054 * est.std_error.unwrap()).abs() < 1e-9);
    }
    assert_eq!(report.rows.used, 2000);
    assert_eq!(report.rows.dropped, 0);
    assert_eq!(report.stages[0].diagnostics.validation_rows, data.validation_count(1));
    let alpha = report.stages[1].adherence.as_ref().unwrap();
    assert_eq!(alpha.terms, ["1", "X[2]", "Astar[2]"]);
    assert_eq!(alpha.values, direct.stages[1].alpha.as_ref().unwrap().as_slice());
    assert_eq!(report.stages[1].rule.terms, ["1", "X[2]", "A[1]"]);
}

fn write_grid(path: &Path, rows: &[[f64; 6]]) {
    let mut text = String::from("alpha[1]:1,alpha[1]:X[1],alpha[1]:Astar[1],alpha[2]:1,alpha[2]:X[2],alpha[2]:Astar[2]\n");
    for r in rows {
        text += &r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn read_sweep(out: &Path) -> Vec<(usize, f64, Option<f64>)> {
    std::fs::read_to_string(out.join("sweep.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().ok())
        })
        .collect()
}

#[test]
fn sensitivity_reductions() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 1500, "modified-prescribed", fitted(), json!({}));
    let fit = analyze(&config, &dir.path().join("fit"), &[]);
    let naive_config = setup(dir.path(), 1500, "standard-naive-proxy", None, json!({}));
    let naive = analyze(&naive_config, &dir.path().join("naive"), &[]);

    let alpha: Vec<f64> = fit.stages.iter().flat_map(|s| s.adherence.as_ref().unwrap().values.clone()).collect();
    let grid = dir.path().join("grid.csv");
    let perfect = [-60.0, 0.0, 120.0, -60.0, 0.0, 120.0];
    write_grid(&grid, &[alpha.clone().try_into().unwrap(), perfect]);
    let out = dir.path().join("sweep");
    let o = run(&["sensitivity", p(&config), p(&grid), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_sweep(&out);
    assert_eq!(rows.len(), 10);
    for k in 0..5 {
        assert!((rows[k].1 - fit.psi[k].estimate).abs() < 1e-10);
        assert!((rows[5 + k].1 - naive.psi[k].estimate).abs() < 1e-10);
    }
}

#[test]
fn sweep_agreement_is_a_fraction_with_self_agreement_first() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 1500, "modified-prescribed", fitted(), json!({}));
    let grid = dir.path().join("grid.csv");
    let base = [-2.5, 0.1, 5.0, -2.5, 0.1, 5.0];
    let rows: Vec<[f64; 6]> = (0..5)
        .map(|i| {
            let mut r = base;
            r[2] -= i as f64;
            r[5] -= i as f64;
            r
        })
        .collect();
    write_grid(&grid, &rows);
    let out = dir.path().join("sweep");
    let o = run(&["sensitivity", p(&config), p(&grid), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = read_sweep(&out);
    assert_eq!(sweep.len(), 25);
    for (point, _, agreement) in &sweep {
        let a = agreement.unwrap();
        assert!((0.0..=1.0).contains(&a));
        if *point == 0 {
            assert_eq!(a, 1.0);
        }
    }
}

#[test]
fn malformed_grid_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 300, "modified-prescribed", fitted(), json!({}));
    let grid = dir.path().join("grid.csv");
    std::fs::write(&grid, "alpha[1]:1,alpha[1]:X[1]\n0,1\n").unwrap();
    let out = dir.path().join("sweep");
    let o = run(&["sensitivity", p(&config), p(&grid), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing column"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |out: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut c = bin();
        c.args(["simulate", "--scenario", "s1", "--n", "200", "--reps", "1", "--estimators", "naive-proxy", "--out", p(out)]);
        if let Some(e) = env {
            c.env("DTR_ADHERE_SEED", e);
        }
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        let config: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
        config["seed"].as_u64().unwrap()
    };
    let out = dir.path().join("out");
    assert_eq!(seed_of(&out, None, None), 1);
    assert_eq!(seed_of(&out, Some("42"), None), 42);
    assert_eq!(seed_of(&out, Some("42"), Some("7")), 7);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_do_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let sim = |jobs: &str| {
        let out = dir.path().join(format!("sim{jobs}"));
        let o = run(&[
            "simulate", "--scenario", "s3", "--n", "400", "--reps", "6", "--validation", "0.3", "--seed", "5",
            "--coverage", "--jobs", jobs, "--out", p(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir_bytes(&out)
    };
    assert_eq!(sim("1"), sim("3"));

    let config = setup(dir.path(), 500, "modified-prescribed", fitted(), json!({"method": "bootstrap-percentile", "replicates": 30}));
    let fit = |jobs: &str| {
        let out = dir.path().join(format!("fit{jobs}"));
        analyze(&config, &out, &["--jobs", jobs, "--seed", "9"]);
        dir_bytes(&out)
    };
    assert_eq!(fit("1"), fit("4"));
}
