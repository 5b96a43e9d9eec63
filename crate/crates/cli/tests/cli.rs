//! Exit codes and end-to-end behaviour of the `spoof` binary.

use std::path::Path;
use std::process::{Command, Output};

fn spoof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spoof")).args(args).output().expect("run spoof")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stub_args() -> Vec<String> {
    let exe = env!("CARGO_BIN_EXE_spoof");
    vec!["--command".into(), exe.into(), "--command-arg=serve-stub".into(), "--command-arg=--stdio".into()]
}

#[test]
fn dry_run_prints_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = spoof(&["attack", "--weights", "w.spwt", "--budget", "7", "--seeds", "0..3,9", "--out", out_dir.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["budget"], 7);
    assert_eq!(cfg["seeds"], serde_json::json!([0, 1, 2, 9]));
    assert!(!out_dir.exists());
}

#[test]
fn configuration_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let o = out_dir.to_str().unwrap();
    assert_eq!(code(&spoof(&["attack", "--weights", "/nonexistent.spwt", "--out", o, "--seeds", "0"])), 1);
    assert_eq!(code(&spoof(&["attack", "--weights", "w.spwt", "--out", o, "--seeds", ""])), 1);
    assert_eq!(code(&spoof(&["attack", "--weights", "w.spwt", "--out", o, "--budget", "0"])), 1);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "bogus": true}"#).unwrap();
    assert_eq!(code(&spoof(&["attack", "--config", bad.to_str().unwrap()])), 1);
}

#[test]
fn unreachable_oracle_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spoof(&["attack", "--remote", "127.0.0.1:1", "--timeout-ms", "500", "--seeds", "0", "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn oracle_dying_mid_run_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    // Answers the hello and the baseline query, then hangs up.
    let script = r#"read l; echo '{"op":"hello","num_classes":2,"input_shape":[1,3,3]}'
read l; id=$(echo "$l" | sed 's/.*"id":\([0-9]*\).*/\1/'); echo "{\"op\":\"probs\",\"id\":$id,\"probs\":[[0.5,0.5]]}""#;
    let run = tmp.path().join("run");
    let out = spoof(&[
        "attack", "--command", "sh", "--command-arg=-c", &format!("--command-arg={script}"),
        "--targets", "0", "--budget", "20", "--seeds", "0", "--out", run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let records: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("seed_0/records.json")).unwrap()).unwrap();
    assert_eq!(records["partial"], true);
}

#[test]
fn attack_metrics_export_against_the_stdio_stub() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["attack".to_string(), "--budget".into(), "30".into(), "--seeds".into(), "0,1".into(), "--out".into()];
    args.push(run.to_str().unwrap().into());
    args.extend(stub_args());
    let out = Command::new(env!("CARGO_BIN_EXE_spoof")).args(&args).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [0, 1] {
        for class in 0..10 {
            assert!(run.join(format!("seed_{seed}/class_{class}.png")).is_file());
        }
    }
    // A uniform classifier never rises above 1/10, so nothing is accepted.
    let csv = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "spoof");
    assert!((row[3].parse::<f64>().unwrap() - 10.0).abs() < 1e-4);
    assert_eq!(row[5], "0.0000");
    assert_eq!(row[6], "30");

    let metrics = spoof(&["metrics", "--run", run.to_str().unwrap(), "--stat", "mean"]);
    assert_eq!(code(&metrics), 0);
    assert_eq!(String::from_utf8(metrics.stdout).unwrap().lines().nth(1).unwrap().split(',').nth(6), Some("30"));

    let heat = tmp.path().join("heat.csv");
    let export = spoof(&["export", "--run", run.to_str().unwrap(), "--out", heat.to_str().unwrap()]);
    assert_eq!(code(&export), 0);
    assert!(std::fs::read_to_string(&heat).unwrap().lines().count() > 10);
}

#[test]
fn evolve_writes_archives() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("evo");
    let mut args: Vec<String> = ["evolve", "--encoding", "cppn", "--population", "4", "--generations", "5", "--seeds", "3", "--out"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.push(run.to_str().unwrap().into());
    args.extend(stub_args());
    let out = Command::new(env!("CARGO_BIN_EXE_spoof")).args(&args).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&run.join("seed_3/archive.json")).is_file());
    let row = String::from_utf8(out.stdout).unwrap();
    assert_eq!(row.lines().nth(1).unwrap().split(',').nth(6), Some("2"));
}
