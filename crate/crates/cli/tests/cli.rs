use std::f64::consts::FRAC_1_SQRT_2;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rip-threshold")).args(args).output().expect("binary runs")
}

fn json_stdout(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn close(v: &Value, expected: f64, tol: f64) -> bool {
    (v.as_f64().expect("number") - expected).abs() <= tol
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# {"));
    lines.next().unwrap();
    lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn threshold_rank_one_shorthand() {
    let v = json_stdout(&["threshold", "--rho", "1", "--phi", "90"]);
    let r = &v["report"];
    assert!(close(&r["delta_foc"], FRAC_1_SQRT_2, 1e-12));
    assert!(close(&r["sin_theta"], FRAC_1_SQRT_2, 1e-12));
    assert!(close(&r["eta"], 0.17157, 1e-5));
    assert_eq!(r["coincident"], false);
    for key in ["conditioning", "neighborhood_bound", "soc_lower_bound", "sample_estimate"] {
        assert!(r[key].is_number(), "{key}");
    }
    assert_eq!(v["metadata"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["metadata"]["config"]["global"]["c0"], 1.0);
}

#[test]
fn threshold_coincident_and_zero_points() {
    let dir = tempfile::tempdir().unwrap();
    let z = write(dir.path(), "z.txt", "3 2\n1 0.5\n-0.25 2\n0 1\n");
    let zero = write(dir.path(), "x0.txt", "3 2\n0 0\n0 0\n0 0\n");
    let v = json_stdout(&["threshold", "--x", &z, "--z", &z]);
    assert_eq!(v["report"]["delta_foc"], 1.0);
    assert_eq!(v["report"]["coincident"], true);
    let v = json_stdout(&["threshold", "--x", &zero, "--z", &z]);
    assert_eq!(v["report"]["delta_foc"], 0.0);
}

#[test]
fn certificate_orthogonal_pair() {
    let v = json_stdout(&["certificate", "--rho", "1", "--phi", "90", "--trials", "300"]);
    assert_eq!(v["outcome"], "certified");
    assert!(close(&v["certificate"]["eta"], 0.17157, 1e-5));
    assert!(v["certificate"]["v1"].as_array().unwrap().len() == 4);
    let s = &v["summary"];
    assert!(s["gradient_norm"].as_f64().unwrap() <= 1e-8);
    assert!(close(&s["spectral_delta"], FRAC_1_SQRT_2, 1e-12));
    assert!(s["monte_carlo_delta_hat"].as_f64().unwrap() <= s["spectral_delta"].as_f64().unwrap() + 1e-10);
    assert!(s["primal_dual_gap"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn certificate_random_pair_matches_dual() {
    let dir = tempfile::tempdir().unwrap();
    let x = write(dir.path(), "x.txt", "4 2\n0.3 -1.1\n0.8 0.2\n-0.5 0.9\n1.2 0.4\n");
    let z = write(dir.path(), "z.txt", "4 2\n1.0 0.1\n-0.4 0.7\n0.2 -0.3\n0.6 1.5\n");
    let v = json_stdout(&["certificate", "--x", &x, "--z", &z, "--trials", "200"]);
    assert!(v["summary"]["primal_dual_gap"].as_f64().unwrap() <= 1e-8);
    assert!(v["summary"]["gradient_norm"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn certificate_aligned_pair_has_none() {
    let v = json_stdout(&["certificate", "--rho", "2", "--phi", "0"]);
    assert_eq!(v["outcome"], "no-certificate");
    assert!(v.get("certificate").is_none());
}

#[test]
fn sweep_bound_column_is_sqrt_one_minus_eps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let status = run(&["sweep", "--samples", "200", "--out", out.to_str().unwrap()]).status;
    assert!(status.success());
    let rows = csv_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 9);
    for (i, row) in rows.iter().enumerate() {
        let eps = 0.1 * (i + 1) as f64;
        assert!((row[0] - eps).abs() < 1e-12);
        assert!((row[1] - (1.0 - row[0]).sqrt()).abs() < 1e-15);
        assert!(row[2] >= row[1]);
    }
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "sweep");
    assert_eq!(meta["seed"], 0);
}

#[test]
fn grid_csv_and_json_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.csv");
    let args = ["grid", "--rho-count", "4", "--phi-count", "3", "--rho-min", "0.5", "--rho-max", "2"];
    assert!(run(&[&args[..], &["--out", out.to_str().unwrap()]].concat()).status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().nth(1).unwrap() == "rho,phi,delta_foc,rel_error");
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 12);
    let v = json_stdout(&[&args[..], &["--format", "json"]].concat());
    let json_rows = v["rows"].as_array().unwrap();
    for (row, j) in rows.iter().zip(json_rows) {
        assert_eq!(row[2], j["delta_foc"].as_f64().unwrap());
    }
    assert_eq!((rows[3][0], rows[3][1], rows[3][2]), (1.0, 0.0, 1.0));
    assert!((rows[5][1] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    assert!((rows[5][2] - FRAC_1_SQRT_2).abs() < 1e-12);
}

#[test]
fn experiment_writes_trials_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trials.csv");
    let args = ["experiment", "--n", "4", "--m", "6,24", "--eps", "0.5", "--trials", "12", "--seed", "4"];
    assert!(run(&[&args[..], &["--out", out.to_str().unwrap()]].concat()).status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2 + 24);
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("trials.csv.summary.json")).unwrap()).unwrap();
    let cells = summary["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(summary["metadata"]["config"]["args"]["trials"], 12);
    assert!(cells[1]["success_rate"].as_f64().unwrap() >= 0.9);
    assert!(!run(&args).status.success());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let args = ["sweep", "--eps", "0.2,0.6", "--samples", "300", "--seed", "17", "--out", p.to_str().unwrap()];
        assert!(run(&args).status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.csv");
    let args = ["sweep", "--eps", "0.2,0.6", "--samples", "300", "--seed", "18", "--out", c.to_str().unwrap()];
    assert!(run(&args).status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn saved_factors_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (x, z) = (dir.path().join("x.txt"), dir.path().join("z.txt"));
    let (xs, zs) = (x.to_str().unwrap(), z.to_str().unwrap());
    let first = json_stdout(&["threshold", "--rho", "0.7", "--phi", "33.3", "--save-x", xs, "--save-z", zs]);
    let x_text = fs::read_to_string(&x).unwrap();
    let second = json_stdout(&["threshold", "--x", xs, "--z", zs, "--save-x", xs]);
    assert_eq!(fs::read_to_string(&x).unwrap(), x_text);
    assert_eq!(first["report"], second["report"]);
}

#[test]
fn verify_passes_and_lists_checks() {
    let out = run(&["verify", "--pairs", "20", "--probes", "50", "--lemma-cases", "20", "--neighborhood-samples", "200"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() >= 10);
    assert!(text.lines().last().unwrap().starts_with("verify: 15/15 checks passed"));
}

#[test]
fn verify_default_run_exits_zero() {
    let out = run(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8(out.stdout).unwrap().contains("verify: 15/15 checks passed"));
}

#[test]
fn usage_and_input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.txt", "2 1\n1\n");
    let ok = write(dir.path(), "ok.txt", "2 1\n1\n0\n");
    let cases: Vec<Vec<&str>> = vec![
        vec!["frobnicate"],
        vec!["threshold"],
        vec!["threshold", "--rho", "1"],
        vec!["threshold", "--x", &bad, "--z", &ok],
        vec!["threshold", "--x", "/nonexistent/x.txt", "--z", &ok],
        vec!["grid", "--format", "xml"],
        vec!["threshold", "--rho", "1", "--phi", "45", "--c0", "-1"],
        vec!["sweep", "--eps", "0"],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}
