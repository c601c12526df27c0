use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tailfactor"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn grid_panel(dir: &Path, n: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> String {
    let mut text = String::from("unit");
    for j in 0..t {
        text.push_str(&format!(",t{j}"));
    }
    text.push('\n');
    for i in 0..n {
        text.push_str(&format!("u{i}"));
        for j in 0..t {
            text.push_str(&format!(",{}", f(i, j)));
        }
        text.push('\n');
    }
    write(dir, "panel.csv", &text)
}

fn simulated(dir: &Path, dgp: &str, n: &str) -> String {
    let path = dir.join(format!("dgp{dgp}.csv"));
    let p = path.to_str().unwrap();
    let out = run(&["simulate", "--dgp", dgp, "--N", n, "--T", n, "--lambda", "3", "--seed", "7", "-o", p]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    p.to_owned()
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "{}", stderr(out));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn simulate_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for threads in ["1", "2", "1"] {
        let out = run(&["--threads", threads, "simulate", "--dgp", "5", "--N", "12", "--T", "9", "--lambda", "3", "--seed", "11"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push(out.stdout);
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let path = dir.path().join("p.csv");
    let p = path.to_str().unwrap();
    let out = run(&["simulate", "--dgp", "5", "--N", "12", "--T", "9", "--lambda", "3", "--seed", "11", "-o", p]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&path).unwrap(), outputs[0]);
    let other = run(&["simulate", "--dgp", "5", "--N", "12", "--T", "9", "--lambda", "3", "--seed", "12"]);
    assert_ne!(other.stdout, outputs[0]);
}

#[test]
fn simulate_writes_truth_and_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.json");
    let cov = dir.path().join("cov.csv");
    let out = run(&[
        "simulate", "--dgp", "5", "--N", "6", "--T", "5", "--lambda", "4", "--seed", "1",
        "--truth", truth.to_str().unwrap(), "--covariates-out", cov.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let t: Value = serde_json::from_slice(&std::fs::read(&truth).unwrap()).unwrap();
    assert_eq!(t["kind"], "truth");
    assert_eq!(t["result"]["true_threshold"].as_array().unwrap().len(), 6);
    let cov = std::fs::read_to_string(&cov).unwrap();
    assert!(cov.starts_with("unit,time,"));
    assert_eq!(cov.lines().count(), 1 + 30);
}

#[test]
fn crossed_bounds_exit_with_usage_code_naming_both_values() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path(), "1", "10");
    let out = run(&["fit", &panel, "--r", "1", "--m", "0.5", "--M", "0.25"]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("0.5") && msg.contains("0.25"), "{msg}");
}

#[test]
fn missing_factor_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path(), "1", "10");
    assert_eq!(code(&run(&["fit", &panel])), 2);
}

#[test]
fn too_few_excesses_exit_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let panel = grid_panel(dir.path(), 4, 4, |i, t| (i + t) as f64);
    let out = run(&["eot", &panel, "--k", "10", "--force-degenerate"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("excesses"));
}

#[test]
fn nonpositive_tail_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let panel = grid_panel(dir.path(), 3, 3, |i, t| -1.0 - (i * 3 + t) as f64);
    let out = run(&["evt", &panel, "--k", "2", "--p", "0.01"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn bad_input_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(code(&run(&["evt", missing.to_str().unwrap()])), 3);
    let bad = write(dir.path(), "bad.csv", "unit,t1,t2\nu1,1.0,abc\nu2,2.0,3.0\n");
    assert_eq!(code(&run(&["evt", &bad])), 3);
    let gap = write(dir.path(), "gap.csv", "unit,time,value\na,1,1.0\na,2,2.0\nb,1,3.0\n");
    assert_eq!(code(&run(&["evt", &gap, "--format", "long-csv"])), 3);
}

#[test]
fn help_shows_defaults() {
    let out = run(&["fit", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["[default: 0.1]", "[default: 1.6]", "[default: 5]", "[default: 100]", "TAILFACTOR_THREADS"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
    let text = String::from_utf8_lossy(&run(&["eot", "--help"]).stdout).into_owned();
    for needle in ["[default: 0.5]", "[default: 0.05]", "[default: 3]", "[default: 10]", "[default: constant]"] {
        assert!(text.contains(needle), "missing {needle} in\n{text}");
    }
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path(), "1", "10");
    let cfg = write(dir.path(), "cfg.json", r#"{"k": 7, "p": 0.001}"#);
    let from_file = json(&run(&["evt", &panel, "--config", &cfg]));
    assert_eq!(from_file["result"]["estimates"]["k"], 7);
    assert_eq!(from_file["result"]["p"], 0.001);
    let overridden = json(&run(&["evt", &panel, "--config", &cfg, "--k", "12"]));
    assert_eq!(overridden["result"]["estimates"]["k"], 12);
    let by_frac = json(&run(&["evt", &panel, "--config", &cfg, "--k-frac", "0.2"]));
    assert_eq!(by_frac["result"]["estimates"]["k"], 20);
    let defaults = json(&run(&["evt", &panel]));
    assert_eq!(defaults["result"]["estimates"]["k"], 10);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path(), "1", "10");
    let cfg = write(dir.path(), "cfg.json", r#"{"kk": 7}"#);
    let out = run(&["evt", &panel, "--config", &cfg]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("kk"));
}

#[test]
fn fit_output_is_versioned_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path(), "1", "10");
    let out = dir.path().join("fit.json");
    let res = run(&["fit", &panel, "--r", "1", "--restarts", "1", "--p", "0.001", "-o", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(res.stdout.is_empty());
    let v: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["kind"], "fit");
    let inter = v["result"]["intermediate_surface"].as_array().unwrap();
    let extreme = v["result"]["extreme_surface"].as_array().unwrap();
    assert_eq!(inter.len(), 10);
    let a = inter[0][0].as_f64().unwrap();
    let b = extreme[0][0].as_f64().unwrap();
    assert!(b > a && a > 0.0);
}

#[test]
fn failed_run_leaves_existing_output_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let panel = grid_panel(dir.path(), 4, 4, |i, t| (i + t) as f64);
    let out = dir.path().join("out.json");
    std::fs::write(&out, "previous").unwrap();
    let res = run(&["eot", &panel, "--k", "10", "--force-degenerate", "-o", out.to_str().unwrap()]);
    assert_eq!(code(&res), 4);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "previous");
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}

#[test]
fn validate_and_select_report_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path(), "1", "15");
    let v = json(&run(&["validate", &panel, "--alpha", "0.10"]));
    let ks = &v["result"]["ks"];
    let p = ks["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(v["result"]["reject"].as_bool().unwrap(), p < 0.10);
    assert_eq!(code(&run(&["validate", &panel, "--alpha", "0.2"])), 2);
    let s = json(&run(&["select", &panel, "--k-frac", "0.2", "--rmax", "2", "--restarts", "1"]));
    assert_eq!(s["result"]["criterion_values"].as_array().unwrap().len(), 3);
    assert!(s["result"]["r_hat"].as_u64().unwrap() <= 2);
}

#[test]
fn evt_writes_hill_plot() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulated(dir.path(), "1", "10");
    let plot = dir.path().join("hill.csv");
    let out = run(&["evt", &panel, "--hill-plot", plot.to_str().unwrap(), "--hill-kmax", "20"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&plot).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,gamma_hat"));
    assert_eq!(lines.count(), 19);
}

#[test]
fn eot_qr_threshold_uses_covariates() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("p.csv");
    let cov = dir.path().join("c.csv");
    let out = run(&[
        "simulate", "--dgp", "5", "--N", "15", "--T", "15", "--lambda", "3", "--seed", "3",
        "-o", panel.to_str().unwrap(), "--covariates-out", cov.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let p = panel.to_str().unwrap();
    assert_eq!(code(&run(&["eot", p, "--threshold", "qr"])), 2);
    let v = json(&run(&["eot", p, "--threshold", "qr", "--covariates", cov.to_str().unwrap(), "--force-r", "1", "--restarts", "1"]));
    assert_eq!(v["kind"], "eot");
    assert_eq!(v["result"]["r_selected"], 1);
}

#[test]
fn bench_writes_report_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.json",
        r#"{"dgp_spec":{"dgp":1,"N":10,"T":10,"lambda":3,"seed":0},"tail":{"k_frac":0.1},
            "model_grid":[{"model":"degenerate"},{"model":"ftvm","r":1}],"reps":2,"fit":{"n_restarts":1},"c_reps":3}"#,
    );
    let report = dir.path().join("r.json");
    let table = dir.path().join("r.txt");
    let csv = dir.path().join("r.csv");
    let out = run(&[
        "bench", "--config", &cfg, "-o", report.to_str().unwrap(),
        "--table", table.to_str().unwrap(), "--csv", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["kind"], "bench");
    assert!(std::fs::read_to_string(&table).unwrap().contains("r=1"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 * 2);
    let bad = write(dir.path(), "bad.json", r#"{"dgp_spec":{}}"#);
    assert_eq!(code(&run(&["bench", "--config", &bad])), 2);
}
