use std::path::Path;
use std::process::{Command, Output};

fn dlr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlr")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("batch");
    let out = dlr(&["gen", "--regime", "easy", "--instances", "3", "--seed", "5", "--out", p(&batch)]);
    assert!(out.status.success(), "{out:?}");
    assert!(batch.join("instance-7.json").exists());

    let results = dir.path().join("results.csv");
    let manifest = batch.join("manifest.json");
    let run = |extra: &[&str]| {
        let mut args = vec!["run", "--manifest", p(&manifest), "--algs", "fn,bp", "--tol", "1e-8", "--exact"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", p(&results)]);
        dlr(&args)
    };
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = std::fs::read_to_string(&results).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(String::from_utf8_lossy(&out.stdout).contains("6 rows computed"));

    let out = run(&["--sequential"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 rows computed, 6 already present"));
    assert_eq!(std::fs::read_to_string(&results).unwrap(), text);

    let summary = dir.path().join("summary.json");
    let out = dlr(&["summarize", "--in", p(&results), "--out", p(&summary)]);
    assert!(out.status.success(), "{out:?}");
    assert!(std::fs::read_to_string(&summary).unwrap().contains("\"mean_l1\""));
    assert!(dir.path().join("summary.scatter-fn.txt").exists());

    let trace = dir.path().join("trace.tsv");
    let out = dlr(&["trace", "--instance", p(&batch.join("instance-5.json")), "--alg", "fn", "--out", p(&trace)]);
    assert!(out.status.success(), "{out:?}");
    assert!(std::fs::read_to_string(&trace).unwrap().contains("iteration\twskl\tresidual"));
}

#[test]
fn partial_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("b");
    assert!(dlr(&["gen", "--regime", "hard", "--instances", "2", "--out", p(&batch)]).status.success());
    std::fs::write(batch.join("instance-1.json"), "[]").unwrap();
    let out = dlr(&[
        "run",
        "--manifest",
        p(&batch.join("manifest.json")),
        "--algs",
        "mf",
        "--max-iter",
        "500",
        "--out",
        p(&dir.path().join("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn fatal_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dlr(&["run", "--manifest", p(&dir.path().join("missing.json")), "--out", p(&dir.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    assert_eq!(dlr(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(dlr(&["phase", "--alg", "xyz", "--out", p(&dir.path().join("t.csv"))]).status.code(), Some(1));
    let out = dlr(&["gen", "--regime", "custom", "--out", p(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(dlr(&["--help"]).status.code(), Some(0));
}

#[test]
fn phase_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let tc = dir.path().join("tc.csv");
    let out = dlr(&["phase", "--alg", "mf,bp", "--out", p(&tc)]);
    assert!(out.status.success(), "{out:?}");
    let text = std::fs::read_to_string(&tc).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["algorithm", "t_c", "reference", "delta"]);
    let t_mf: f64 = rows[1][1].parse().unwrap();
    let t_bp: f64 = rows[2][1].parse().unwrap();
    assert!((t_mf - 4.0).abs() < 2e-3 && (t_bp - 2.885).abs() < 5e-3);
}

#[test]
fn custom_regime_generation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dlr(&[
        "gen", "--regime", "custom", "--rows", "3", "--cols", "5", "--var-theta", "1", "--var-phi", "0.5",
        "--instances", "2", "--out", p(&dir.path().join("c")),
    ]);
    assert!(out.status.success(), "{out:?}");
    let manifest = std::fs::read_to_string(dir.path().join("c/manifest.json")).unwrap();
    assert!(manifest.contains("\"custom\"") && manifest.contains("\"cols\": 5"));
}
