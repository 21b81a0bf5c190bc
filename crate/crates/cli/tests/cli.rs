//! End-to-end tests of the `ardiff` binary: worked examples, determinism,
//! config replay, and the exit-code taxonomy.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ardiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ardiff")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_causal_target(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("causal.json");
    fs::write(&path, r#"{"mean":[0.0,0.0],"cov":[[1.0,1.0],[1.0,2.0]]}"#).unwrap();
    path
}

#[test]
fn schedule_prints_the_worked_grid() {
    let out = run(&[
        "schedule", "--T", "2", "--eta", "0.5", "--delta", "0.25", "--L", "1",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "r,t_r,eta_r,regime");
    // 7 steps: 2 uniform, 4 geometric, 1 tail
    let rows: Vec<Vec<&str>> = lines[1..8].iter().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0][2], "0.5");
    assert_eq!(rows[1][2], "0.5");
    assert_eq!(rows[0][3], "uniform");
    assert_eq!(rows[2][3], "geometric");
    assert_eq!(rows[6][3], "tail");
    let t6: f64 = rows[6][1].parse().unwrap();
    assert!((2.0 - t6 - 0.19753086419753085).abs() < 1e-12);
    // the JSON bound report follows the grid
    assert!(text.contains("\"achieved_tail\": 0.19753086419753085"));
}

#[test]
fn counterexample_worked_example() {
    let out = run(&[
        "counterexample",
        "--eps",
        "0.2",
        "--M",
        "5",
        "--dx",
        "1",
        "--dy",
        "1",
        "--probe",
        "1",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let report = &v["report"];
    assert!(report["kl_joint"].as_f64().unwrap() <= 0.4);
    assert!(report["passes_joint"].as_bool().unwrap());
    assert!((report["kl_cond_mean_term"].as_f64().unwrap() - 100.0 / (4.0 * 1.44)).abs() < 1e-9);
}

#[test]
fn synth_gen_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = run(&[
            "synth-gen",
            "--task",
            "1",
            "--n",
            "10",
            "--seed",
            "7",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    for i in 0..10 {
        let name = format!("sample_{i:04}.ppm");
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name} differs between identically seeded runs"
        );
    }
    assert_eq!(
        fs::read(a.join("index.csv")).unwrap(),
        fs::read(b.join("index.csv")).unwrap()
    );
}

#[test]
fn pushforward_replay_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let target = write_causal_target(tmp.path());
    let first = tmp.path().join("first");
    let out = run(&[
        "pushforward",
        "--target",
        target.to_str().unwrap(),
        "--layout",
        "1,1",
        "--T",
        "6",
        "--eta",
        "0.02",
        "--delta",
        "0.25",
        "--L",
        "1",
        "--eps",
        "0.1",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let replay = tmp.path().join("replay");
    let out = run(&[
        "pushforward",
        "--config",
        first.join("config.json").to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read(first.join("pushforward.json")).unwrap(),
        fs::read(replay.join("pushforward.json")).unwrap()
    );
    assert_eq!(
        fs::read(first.join("config.json")).unwrap(),
        fs::read(replay.join("config.json")).unwrap()
    );
    // manifests agree on the digest
    let m1: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("run.json")).unwrap()).unwrap();
    let m2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(replay.join("run.json")).unwrap()).unwrap();
    assert_eq!(m1["config_digest"], m2["config_digest"]);
}

#[test]
fn sample_writes_expected_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let target = write_causal_target(tmp.path());
    let dir = tmp.path().join("s");
    let out = run(&[
        "sample",
        "--target",
        target.to_str().unwrap(),
        "--layout",
        "1,1",
        "--T",
        "4",
        "--eta",
        "0.1",
        "--delta",
        "0.25",
        "--L",
        "1",
        "--n",
        "16",
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.join("samples.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x0,x1");
    assert_eq!(lines.len(), 17);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sample");
    assert!(manifest["extra"]["schedule_digest"].is_string());
}

#[test]
fn report_over_a_pushforward_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let target = write_causal_target(tmp.path());
    let mut run_args: Vec<String> = vec!["report".into()];
    for eta in ["0.04", "0.02", "0.01"] {
        let dir = tmp.path().join(format!("push_{eta}"));
        let out = run(&[
            "pushforward",
            "--target",
            target.to_str().unwrap(),
            "--layout",
            "1,1",
            "--T",
            "8",
            "--eta",
            eta,
            "--delta",
            "0.25",
            "--L",
            "1",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        run_args.push("--run".into());
        run_args.push(dir.to_str().unwrap().into());
    }
    let rep = tmp.path().join("rep");
    run_args.extend(["--out".into(), rep.to_str().unwrap().into()]);
    let refs: Vec<&str> = run_args.iter().map(String::as_str).collect();
    let out = run(&refs);
    assert!(out.status.success());
    let svg = fs::read_to_string(rep.join("kl_vs_eta.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.contains("measured KL"));
    assert!(rep.join("summary.csv").exists());
}

#[test]
fn train_then_sample_with_the_learned_model() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("g1.json");
    fs::write(&target, r#"{"mean":[0.5],"cov":[[1.0]]}"#).unwrap();
    let train_dir = tmp.path().join("train");
    let out = run(&[
        "train",
        "--target",
        target.to_str().unwrap(),
        "--layout",
        "1",
        "--T",
        "2",
        "--eta",
        "0.25",
        "--delta",
        "0.25",
        "--L",
        "1",
        "--steps",
        "400",
        "--batch",
        "64",
        "--lr",
        "0.003",
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(train_dir.join("model.json").exists());
    assert!(train_dir.join("trace.csv").exists());

    let sample_dir = tmp.path().join("samples");
    let out = run(&[
        "sample",
        "--target",
        target.to_str().unwrap(),
        "--layout",
        "1",
        "--T",
        "2",
        "--eta",
        "0.25",
        "--delta",
        "0.25",
        "--L",
        "1",
        "--n",
        "32",
        "--model",
        train_dir.join("model.json").to_str().unwrap(),
        "--out",
        sample_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(sample_dir.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 33);
    // every generated value parses and is finite
    for line in csv.lines().skip(1) {
        let v: f64 = line.parse().unwrap();
        assert!(v.is_finite());
    }
}

#[test]
fn report_renders_the_ratio_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let gen_dir = tmp.path().join("gen");
    let out = run(&[
        "synth-gen",
        "--task",
        "2",
        "--n",
        "25",
        "--seed",
        "11",
        "--out",
        gen_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let eval_dir = tmp.path().join("eval");
    let out = run(&[
        "synth-eval",
        "--dir",
        gen_dir.to_str().unwrap(),
        "--task",
        "2",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let rep = tmp.path().join("rep");
    let out = run(&[
        "report",
        "--run",
        eval_dir.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let svg = fs::read_to_string(rep.join("ratio_fit_0.svg")).unwrap();
    assert!(svg.contains("R^2 = 1.0000"), "fit annotation missing");
    assert!(svg.contains("fit y = 1.5"));
}

#[test]
fn empty_report_warns_and_exits_zero() {
    let out = run(&["report"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    // unknown flag: usage error
    let out = run(&["schedule", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    // inadmissible tail width: validation
    let out = run(&[
        "schedule", "--T", "2", "--eta", "0.5", "--delta", "0.9", "--L", "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("admissible"));

    // no stable window: numerical
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace.csv");
    let mut body = String::from("step,loss\n");
    for i in 0..100 {
        body.push_str(&format!("{i},{}\n", if i % 2 == 0 { 1.0 } else { 2.0 }));
    }
    fs::write(&trace, body).unwrap();
    let out = run(&[
        "analyze-trace",
        "--trace",
        trace.to_str().unwrap(),
        "--window",
        "50",
        "--var-threshold",
        "1e-12",
    ]);
    assert_eq!(out.status.code(), Some(3));
}
