use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn metasim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metasim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("METASIM_CORPUS")
        .env_remove("METASIM_OUTPUT")
        .output()
        .expect("spawn metasim")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(metasim(&[
        "gen-corpus",
        "--output",
        data.to_str().unwrap(),
        "--domains",
        "2",
        "--slots",
        "4",
        "--items",
        "30",
        "--dialogues",
        "150",
        "--test-dialogues",
        "30",
        "--seed",
        "3",
    ]));
    data
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn test_run(data: &Path, out: &Path, extra: &[&str]) -> String {
    let corpus = data.join("corpus.jsonl");
    let mut args = vec![
        "test",
        "--corpus",
        corpus.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--tester",
        "context",
        "--episodes",
        "12",
        "--seed",
        "21",
    ];
    args.extend_from_slice(extra);
    ok(metasim(&args))
}

#[test]
fn full_workflow_and_byte_identical_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    assert!(data.join("corpus.jsonl").exists());
    assert!(data.join("test.jsonl").exists());

    let model = dir.path().join("model");
    let stdout = ok(metasim(&[
        "train",
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--output",
        model.to_str().unwrap(),
    ]));
    assert!(stdout.contains("heldout_accuracy"), "{stdout}");
    assert!(model.join("metaphor.idx").exists());

    let a = dir.path().join("run-a");
    let b = dir.path().join("run-b");
    let stdout = test_run(&data, &a, &[]);
    assert!(stdout.contains("ED "), "{stdout}");
    test_run(&data, &b, &[]);
    for f in ["tester_report.json", "metrics.json", "logs.jsonl"] {
        assert_eq!(
            read(&a.join(f)),
            read(&b.join(f)),
            "{f} differs between reruns"
        );
    }
    let config = read(&a.join("config.json"));
    test_run(&data, &a, &[]);
    assert_eq!(config, read(&a.join("config.json")));

    let report: Value = serde_json::from_slice(&read(&a.join("tester_report.json"))).unwrap();
    let metrics: Value = serde_json::from_slice(&read(&a.join("metrics.json"))).unwrap();
    let hash = report["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(metrics["config_hash"], hash);
    assert_eq!(report["seed"], 21);
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["variants"].as_array().unwrap().len(), 3);
    let logs = String::from_utf8(read(&a.join("logs.jsonl"))).unwrap();
    assert_eq!(logs.lines().count(), 36);
    for line in logs.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"], hash);
    }

    // A prebuilt index built from the same corpus changes the hash, not
    // the results.
    let c = dir.path().join("run-c");
    test_run(
        &data,
        &c,
        &["--metaphor", model.join("metaphor.idx").to_str().unwrap()],
    );
    let rc: Value = serde_json::from_slice(&read(&c.join("tester_report.json"))).unwrap();
    assert_ne!(rc["config_hash"], report["config_hash"]);
    assert_eq!(rc["exact_distinct"], report["exact_distinct"]);

    let sim = dir.path().join("sim");
    let stdout = ok(metasim(&[
        "simulate",
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--output",
        sim.to_str().unwrap(),
        "--simulator",
        "agenda",
        "--episodes",
        "10",
        "--seed",
        "4",
        "--decode",
        "argmax",
    ]));
    assert!(stdout.contains("Success"), "{stdout}");
    assert!(!sim.join("tester_report.json").exists());

    let ev = dir.path().join("eval");
    let stdout = ok(metasim(&[
        "eval",
        "--corpus",
        data.join("corpus.jsonl").to_str().unwrap(),
        "--test-corpus",
        data.join("test.jsonl").to_str().unwrap(),
        "--output",
        ev.to_str().unwrap(),
    ]));
    assert!(stdout.contains("F1") && stdout.contains("BLEU"), "{stdout}");
    let m: Value = serde_json::from_slice(&read(&ev.join("metrics.json"))).unwrap();
    let f1 = m["metrics"]["f1"]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn paths_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let out = dir.path().join("env-run");
    let res = Command::new(env!("CARGO_BIN_EXE_metasim"))
        .args(["simulate", "--episodes", "3", "--seed", "1"])
        .env("METASIM_CORPUS", data.join("corpus.jsonl"))
        .env("METASIM_OUTPUT", &out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(res);
    assert!(out.join("metrics.json").exists());
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let corpus = data.join("corpus.jsonl");
    let out = dir.path().join("x");
    // seed is mandatory
    let r = metasim(&[
        "simulate",
        "--corpus",
        corpus.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(!r.status.success());
    let r = metasim(&[
        "simulate",
        "--corpus",
        corpus.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--seed",
        "1",
        "--episodes",
        "0",
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("episodes"));
    let r = metasim(&[
        "simulate",
        "--corpus",
        corpus.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--seed",
        "1",
        "--simulator",
        "nobody",
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("available"));
}
