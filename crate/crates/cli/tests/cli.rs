use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

struct Run {
    code: i32,
    report: Option<Value>,
    stderr: String,
}

fn run_in(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Run {
    let report = dir.join(format!("report-{}.json", rand_name(args)));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_convexity-lab"));
    cmd.args(args).arg("--report").arg(&report).env_remove("CONVEXITY_LAB_JOBS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    let report = std::fs::read_to_string(&report).ok().map(|s| serde_json::from_str(&s).unwrap());
    Run {
        code: out.status.code().unwrap(),
        report,
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn rand_name(args: &[&str]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    args.hash(&mut h);
    std::time::SystemTime::now().hash(&mut h);
    h.finish()
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const T1_WEIGHTS: &str = r#"{"widths":[2,2,1],"layers":[[[1,0],[0,1]],[[1],[1]]]}"#;

#[test]
fn certify_interpolating_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(
        dir.path(),
        &["certify", "--data", "teacher:arch=3x4x1,n=20,seed=3", "--weights", "teacher", "--lambda", "0.5", "--theta", "0.1"],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = &r.report.unwrap()["report"];
    assert_eq!(rep["schema_version"], 1);
    let cert = &rep["results"]["certificate"];
    assert_eq!(cert["certified"], true);
    assert!(f(&cert["min_eig"]) >= 0.1);
    assert_eq!(f(&cert["loss"]), 0.0);
    // Zero gradient is impossible here (weight decay), so no probe runs.
    assert!(rep["results"]["isolation"].is_null());
    assert_eq!(rep["results"]["curvature_floor"]["violations"], 0);
}

#[test]
fn certify_fixture_reports_outside_region() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "t1.csv", "1,0.5,1\n");
    let w = write(dir.path(), "w.json", T1_WEIGHTS);
    let r = run_in(
        dir.path(),
        &["certify", "--data", data.to_str().unwrap(), "--weights", w.to_str().unwrap(), "--lambda", "0.5", "--theta", "0.1"],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.report.unwrap();
    let cert = &rep["report"]["results"]["certificate"];
    assert_eq!(cert["in_u"], false);
    assert_eq!(cert["certified"], false);
    assert!((f(&cert["statistic"]) - 0.125f64.sqrt()).abs() < 1e-15);
    assert!(rep["envelope"]["tool_version"].is_string());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "t1.csv", "1,0.5,1\n");
    let d = data.to_str().unwrap();
    let r = run_in(dir.path(), &["certify", "--data", d, "--arch", "2,2,1", "--lambda", "0.1", "--theta", "0.2"], &[]);
    assert_eq!(r.code, 1);
    assert!(r.report.is_none());
    let r = run_in(dir.path(), &["certify", "--data", d, "--arch", "2,2,1", "--lambda", "0.5", "--theta", "0.1", "--bogus"], &[]);
    assert_eq!(r.code, 1);
    let r = run_in(dir.path(), &["certify", "--data", "missing.csv", "--arch", "2,2,1", "--lambda", "0.5", "--theta", "0.1"], &[]);
    assert_eq!(r.code, 1);
    let r = run_in(dir.path(), &["sgd", "--data", d, "--arch", "2,2,1", "--epochs", "1", "--lr", "0.1", "--batch-size", "1"], &[("CONVEXITY_LAB_JOBS", "many")]);
    assert_eq!(r.code, 1);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,loss,grad_sq,gamma_dd,normalized,boundary_hit");
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn bowl_flow_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "origin.csv", "0,0,0,0\n0,0,0,0\n");
    let csv = dir.path().join("flow.csv");
    let r = run_in(
        dir.path(),
        &["flow", "--data", data.to_str().unwrap(), "--arch", "3,2,1", "--lambda", "1", "--horizon", "1", "--step", "0.01", "--log-every", "10", "--csv", csv.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = csv_rows(&csv);
    let g0: f64 = rows[0][2].parse().unwrap();
    let last = rows.last().unwrap();
    let t: f64 = last[0].parse().unwrap();
    let g1: f64 = last[2].parse().unwrap();
    assert!((t - 1.0).abs() < 1e-12);
    assert!((g1 - g0 * (-2.0f64).exp()).abs() <= 1e-6 * g1);
    let norm: f64 = last[4].parse().unwrap();
    assert!((norm - 2.0).abs() < 1e-12);
    let gw = &r.report.unwrap()["report"]["results"]["trajectory"]["gronwall"];
    assert_eq!(gw["holds"], true);
}

#[test]
fn divergence_exits_three_and_keeps_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "origin.csv", "0,0,0\n");
    let csv = dir.path().join("flow.csv");
    let r = run_in(
        dir.path(),
        &["flow", "--data", data.to_str().unwrap(), "--arch", "2,2,1", "--lambda", "1000", "--horizon", "20", "--step", "1", "--csv", csv.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(!csv_rows(&csv).is_empty());
    let rep = r.report.unwrap();
    assert_eq!(rep["report"]["status"], "divergence");
    assert!(rep["report"]["results"]["interrupted"]["error"].is_string());
}

#[test]
fn sgd_trials_write_csvs_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trials");
    let r = run_in(
        dir.path(),
        &[
            "sgd", "--data", "teacher:arch=3x4x1,n=64,seed=5,noise=0.05", "--arch", "3,6,1", "--lambda", "0.01", "--batch-size", "16", "--epochs", "4",
            "--lr", "0:0.2,2:0.05", "--trials", "20", "--out-dir", out.to_str().unwrap(),
        ],
        &[("CONVEXITY_LAB_JOBS", "2")],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.report.unwrap();
    let res = &rep["report"]["results"];
    assert_eq!(res["per_trial"].as_array().unwrap().len(), 20);
    assert_eq!(res["aggregate"]["trials"], 20);
    let seeds: Vec<u64> = res["per_trial"].as_array().unwrap().iter().map(|t| t["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, (0..20).collect::<Vec<_>>());
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 20);
}

#[test]
fn sgd_zero_rate_keeps_loss_constant() {
    let dir = tempfile::tempdir().unwrap();
    let csv_dir = dir.path().join("t");
    let r = run_in(
        dir.path(),
        &["sgd", "--data", "teacher:arch=3x4x1,n=16", "--arch", "3,4,1", "--lambda", "0.01", "--batch-size", "4", "--epochs", "2", "--lr", "0", "--out-dir", csv_dir.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = csv_rows(&csv_dir.join("trial-0.csv"));
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[1] == rows[0][1]));
}

#[test]
fn reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        "data = \"teacher:arch=3x4x1,n=32,seed=2\"\narch = \"3,4,1\"\nlambda = 0.01\nbatch_size = 8\nepochs = 2\nlr = \"0.1\"\ntrials = 3\n",
    );
    let a = run_in(dir.path(), &["sgd", "--config", cfg.to_str().unwrap()], &[("CONVEXITY_LAB_JOBS", "1")]);
    let b = run_in(dir.path(), &["sgd", "--config", cfg.to_str().unwrap()], &[("CONVEXITY_LAB_JOBS", "3")]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    let (a, b) = (a.report.unwrap(), b.report.unwrap());
    assert_eq!(serde_json::to_string(&a["report"]).unwrap(), serde_json::to_string(&b["report"]).unwrap());
    assert_eq!(a["report"]["config"]["batch_size"], 8);
}

#[test]
fn linear_audit_cases() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(
        dir.path(),
        &["linear-audit", "--data", "teacher:arch=3x3x1,n=20,seed=4", "--arch", "3,3,2,1", "--lambda", "0.1", "--starts", "8"],
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.report.unwrap();
    assert_eq!(rep["report"]["results"]["search"]["violations"], 0);

    let zeros = write(dir.path(), "zeros.csv", "1,0,0\n0.3,-0.8,0\n0.5,0.5,0\n");
    let r = run_in(dir.path(), &["linear-audit", "--data", zeros.to_str().unwrap(), "--arch", "2,2,1", "--lambda", "0.1", "--starts", "4"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let points = r.report.unwrap()["report"]["results"]["search"]["points"].as_array().unwrap().clone();
    assert_eq!(points.len(), 4);
    assert!(points.iter().all(|p| p["nonzero"] == false));

    let r = run_in(dir.path(), &["linear-audit", "--data", zeros.to_str().unwrap(), "--arch", "2,1,1", "--lambda", "0.1"], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("width"));
}

fn trajectory_csv(dir: &Path, name: &str, normalized: &[f64]) -> PathBuf {
    let mut text = String::from("t,loss,grad_sq,gamma_dd,normalized,boundary_hit\n");
    for (k, v) in normalized.iter().enumerate() {
        text.push_str(&format!("{k},{},1,{v},{v},0\n", 1.0 / (1.0 + k as f64)));
    }
    write(dir, name, &text)
}

#[test]
fn plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plots");
    let one = trajectory_csv(dir.path(), "one.csv", &[-1.0, 25.0, 3.0, 4.0]);
    let r = run_in(dir.path(), &["plot", "--input", one.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--clip", "10"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.report.unwrap();
    let entry = &rep["report"]["results"]["series"][0];
    assert_eq!(entry["clipped"], 1);
    assert!(f(&entry["max_plotted"]) <= 10.0);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 1);

    let inputs: Vec<PathBuf> = (0..20).map(|k| trajectory_csv(dir.path(), &format!("trial-{k}.csv"), &[-1.0, 1.0 + k as f64, 2.0])).collect();
    let mut args = vec!["plot".to_string(), "--out-dir".into(), dir.path().join("many").to_string_lossy().into_owned(), "--input".into()];
    args.extend(inputs.iter().map(|p| p.to_string_lossy().into_owned()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let r = run_in(dir.path(), &args, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.report.unwrap()["report"]["results"]["histogram_entries"], 20);
    let svg = std::fs::read_to_string(dir.path().join("many/loss-fractions.svg")).unwrap();
    let total: usize = svg
        .split("data-count=\"")
        .skip(1)
        .map(|s| s.split('"').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 20);

    let r = run_in(dir.path(), &["plot", "--input", "nope.csv", "--out-dir", out.to_str().unwrap()], &[]);
    assert_eq!(r.code, 1);
}
