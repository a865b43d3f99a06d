use std::path::Path;
use std::process::{Command, Output};

use ldp_pairwise::matrix::Matrix;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldp-pairwise"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        format!(
            r#"{{"workload": "gini_diversity", "k": 5, "n": [100, 400], "epsilon": [1.0], "protocol": "noninteractive",
                "trials": 10, "master_seed": 1, "dataset": "uniform"{extra}}}"#
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn factorize_writes_a_consistent_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bundle.txt");
    let res = cli(&[
        "factorize",
        "sign_comparison",
        "--k",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("residual"));

    let text = std::fs::read_to_string(&out).unwrap();
    let blocks: Vec<&str> = text.split("\n\n").filter(|b| !b.trim().is_empty()).collect();
    assert_eq!(blocks.len(), 4);
    assert_eq!(blocks[0].trim(), "alpha 0");
    let l = Matrix::from_text(blocks[1]).unwrap();
    let r = Matrix::from_text(blocks[2]).unwrap();
    let w = Matrix::from_text(blocks[3]).unwrap();
    assert_eq!(w.shape(), (6, 6));
    assert!(l.tr_matmul(&r).unwrap().sub(&w).unwrap().inf_norm() < 1e-9);
    assert!((l.one_to_two_norm() - r.one_to_two_norm()).abs() < 1e-9);
}

#[test]
fn failures_emit_one_json_line_and_nonzero_status() {
    let res = cli(&["factorize", "no_such_workload"]);
    assert!(!res.status.success());
    let stderr = String::from_utf8(res.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(line["kind"], "unknown_name");
    assert!(line["error"].as_str().unwrap().contains("no_such_workload"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "trials_typo": 3"#);
    let res = cli(&["simulate", "--config", &cfg]);
    assert!(!res.status.success());
    let line: serde_json::Value = serde_json::from_str(String::from_utf8(res.stderr).unwrap().trim()).unwrap();
    assert_eq!(line["kind"], "parse");
}

#[test]
fn simulate_prints_csv_and_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = cli(&["simulate", "--config", &cfg]);
    assert!(a.status.success());
    let csv = String::from_utf8(a.stdout.clone()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "statistic,protocol,k,n,epsilon,trials,mse,mse_ci_lo,mse_ci_hi,bias,seed"
    );
    assert_eq!(lines.count(), 2);
    let stderr = String::from_utf8(a.stderr).unwrap();
    assert!(stderr.contains("total eps=1"));
    assert!(stderr.contains("slope"));

    let b = cli(&["simulate", "--config", &cfg, "--seed", "2"]);
    assert!(b.status.success());
    assert_ne!(a.stdout, b.stdout);
    assert!(String::from_utf8(b.stdout)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .ends_with(",2"));
}

#[test]
fn simulate_dumps_a_transcript_and_trial_rows() {
    let dir = tempfile::tempdir().unwrap();
    let trials = dir.path().join("trials.csv");
    let cfg = write_config(
        dir.path(),
        &format!(r#", "trial_output": {:?}"#, trials.display().to_string()),
    );
    let dump = dir.path().join("transcript.txt");
    let res = cli(&[
        "simulate",
        "--config",
        &cfg,
        "--dump-transcript",
        dump.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    assert!(!std::fs::read_to_string(&dump).unwrap().is_empty());
    let rows = std::fs::read_to_string(&trials).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 10);
}

#[test]
fn reduce_reports_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("noninteractive", "reduction");
    std::fs::write(&cfg, text).unwrap();
    let res = cli(&["reduce", "--config", &cfg, "--threads", "1"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let out = String::from_utf8(res.stdout).unwrap();
    assert!(out.starts_with("n,epsilon,mmse,qf_mse_n,qf_mse_2n,ratio"));
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn bench_runs() {
    let res = cli(&["bench", "--dims", "4", "--draws", "100"]);
    assert!(res.status.success());
    assert!(String::from_utf8(res.stdout).unwrap().contains("msgs/s"));
}
