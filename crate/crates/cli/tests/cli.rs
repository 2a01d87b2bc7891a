use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eraser(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eraser"));
    cmd.args(args).env_remove("ERASER_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "\
[experiment]
seeds = 3, 4

[workload]
requests = 400

[ensemble]
shards = 6
";

#[test]
fn run_writes_three_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = eraser(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--jobs", "2"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "variant,seed,awt,nor,uncertified_responses,p_uc,p50,p95,p99");
    assert_eq!(lines.len(), 1 + 16);
    assert!(lines[1].starts_with("SISA,3,"));
    assert!(lines[2].starts_with("SISA,4,"));
    for line in &lines[1..] {
        for cell in line.split(',').skip(1) {
            let x: f64 = cell.parse().unwrap();
            assert!(x.is_finite());
        }
    }
    let requests = fs::read_to_string(out.join("requests.csv")).unwrap();
    assert!(requests.starts_with("variant,seed,request_id,arrival,response,wait,verdict,label,postponed\n"));
    assert_eq!(requests.lines().count(), 1 + 16 * 360);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(eraser(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--jobs", "1"], &[]).status.success());
    assert!(eraser(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--jobs", "4"], &[]).status.success());
    for f in ["metrics.csv", "requests.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unknown_key_fails_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[ensemble]\nshards = 4\nshard_count = 4\n");
    let o = eraser(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()], &[]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("ensemble.shard_count"), "{err}");
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = eraser(
        &["run", "--config", &cfg, "--out", out.to_str().unwrap()],
        &[("ERASER_SEED", "42")],
    );
    assert!(o.status.success());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 8);
    assert!(metrics.lines().nth(1).unwrap().starts_with("SISA,42,"));
}

#[test]
fn sweep_writes_one_block_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[experiment]\nvariants = SISA, DIMP\n[workload]\nrequests = 300\n");
    let out = dir.path().join("sw");
    let o = eraser(
        &["sweep", "--config", &cfg, "--param", "ensemble.shards", "--values", "5,10,15", "--out", out.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2);
    assert!(text.lines().nth(1).unwrap().starts_with("ensemble.shards,5,SISA,"));
}

#[test]
fn verify_cert_reports_counts() {
    let o = eraser(&["verify-cert", "--trials", "2000", "--max-shards", "8", "--max-classes", "4", "--seed", "5"], &[]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("soundness violations   0"), "{text}");
    assert!(text.contains("dominance violations   0"), "{text}");
}

#[test]
fn theory_formulas() {
    let o = eraser(&["theory", "--n-u", "10", "--t", "100", "--r", "5,20", "--p-uc", "0.01"], &[]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0][1], 1.25);
    assert_eq!(rows[1][1], 15.0);
    assert!((rows[0][2] - 0.0125).abs() < 1e-12);
}

#[test]
fn theory_grid_simulates() {
    let o = eraser(
        &["theory", "--n-u", "10", "--t", "100", "--r", "5", "--grid", "--inferences", "5000"],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("retrain,sisa_formula,sisa_simulated,sisa_rel_err,"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn gen_workload_matches_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("w.csv");
    let o = eraser(&["gen-workload", "--spec", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let reqs = eraser_core::workload::load_csv(&out).unwrap();
    assert_eq!(reqs.len(), 400);
    assert_eq!(reqs.iter().filter(|r| !r.is_inference()).count(), 40);
}
