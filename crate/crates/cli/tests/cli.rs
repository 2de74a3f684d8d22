use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn seqcal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqcal"))
        .current_dir(dir)
        .env_remove("SEQCAL_SEED")
        .args(args)
        .output()
        .expect("failed to run seqcal")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = seqcal(dir, args);
    assert!(
        out.status.success(),
        "seqcal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), body).unwrap();
}

/// Task spec and a sharpening distortion with inverse temperature 2.
fn toy_files(dir: &Path) {
    write(dir, "task.json", "{}");
    write(dir, "sharp.json", r#"{"temperature": 0.5}"#);
}

const APPENDIX: &str = r#"{"seq_id":"a","t":1,"vocab_size":3,"eos_id":2,"gold_id":0,"entries":[[0,0.4],[1,0.1],[2,0.5]],"rest_mass":0.0}
{"seq_id":"b","t":1,"vocab_size":3,"eos_id":2,"gold_id":0,"entries":[[1,0.5],[2,0.5]],"rest_mass":0.0}
"#;

#[test]
fn appendix_stats() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "appendix.jsonl", APPENDIX);
    let line = ok(d, &["stats", "--logs", "appendix.jsonl", "--bins", "10", "--weighted"]);
    assert!(line.starts_with("weighted_ece=0.500000 records=2"), "{line}");
    assert_eq!(line.lines().count(), 1);
    let w = json(d.join("seqcal-out/weighted_ece.json"));
    assert_eq!(w["metric"], "weighted_ece");
    assert!((w["score"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(w["bins"].as_array().unwrap().len(), 10);

    ok(d, &["stats", "--logs", "appendix.jsonl", "--bins", "10"]);
    let e = json(d.join("seqcal-out/ece.json"));
    assert!((e["score"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let csv = fs::read_to_string(d.join("seqcal-out/ece_reliability.csv")).unwrap();
    assert!(csv.starts_with("bin_lo,bin_hi,mass,avg_confidence,avg_accuracy\n"));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn partitions_write_group_reports() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "appendix.jsonl", APPENDIX);
    ok(
        d,
        &[
            "stats",
            "--logs",
            "appendix.jsonl",
            "--bins",
            "10",
            "--partition",
            "eos",
        ],
    );
    let p = json(d.join("seqcal-out/partition.json"));
    assert!(p["groups"]["eos"].is_object() && p["groups"]["rest"].is_object());
    ok(
        d,
        &["stats", "--logs", "appendix.jsonl", "--partition", "headtail:0.2,0.5"],
    );
    let rows = json(d.join("seqcal-out/head_tail.json"));
    assert_eq!(rows.as_array().unwrap().len(), 2);
}

#[test]
fn single_fit_inverts_sharpening() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    toy_files(d);
    ok(
        d,
        &[
            "toy",
            "gen",
            "--spec",
            "task.json",
            "--n",
            "1500",
            "--distort",
            "sharp.json",
            "--logs-out",
            "val.jsonl",
        ],
    );
    let line = ok(
        d,
        &[
            "fit",
            "--logs",
            "val.jsonl",
            "--mode",
            "single",
            "--params-out",
            "p.json",
        ],
    );
    assert!(line.starts_with("fit single:"), "{line}");
    let p = json(d.join("p.json"));
    assert_eq!(p["version"], "seqcal-params-v1");
    assert_eq!(p["mode"], "single");
    // q ∝ p^(1/0.5) is undone by T = 2.
    let t = p["temperature"].as_f64().unwrap();
    assert!((t - 2.0).abs() / 2.0 < 0.05, "T = {t}");
}

#[test]
fn apply_lowers_weighted_ece() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    toy_files(d);
    ok(
        d,
        &[
            "toy",
            "gen",
            "--spec",
            "task.json",
            "--n",
            "800",
            "--distort",
            "sharp.json",
            "--logs-out",
            "val.jsonl",
        ],
    );
    ok(
        d,
        &[
            "--seed",
            "7",
            "toy",
            "gen",
            "--spec",
            "task.json",
            "--n",
            "800",
            "--distort",
            "sharp.json",
            "--logs-out",
            "test.jsonl",
        ],
    );
    ok(
        d,
        &[
            "fit",
            "--logs",
            "val.jsonl",
            "--mode",
            "single",
            "--params-out",
            "p.json",
        ],
    );
    ok(d, &["stats", "--logs", "test.jsonl", "--weighted"]);
    let before = json(d.join("seqcal-out/weighted_ece.json"))["score"].as_f64().unwrap();
    ok(
        d,
        &[
            "apply",
            "--logs",
            "test.jsonl",
            "--params",
            "p.json",
            "--logs-out",
            "cal.jsonl",
        ],
    );
    ok(d, &["stats", "--logs", "cal.jsonl", "--weighted"]);
    let after = json(d.join("seqcal-out/weighted_ece.json"))["score"].as_f64().unwrap();
    assert!(after < before, "{after} >= {before}");

    // Recalibrated logs are valid logs.
    let text = fs::read_to_string(d.join("cal.jsonl")).unwrap();
    for line in text.lines() {
        seqcal_core::data::parse_log_line(line).unwrap();
    }
}

#[test]
fn variable_fit_and_apply_round_trip() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    toy_files(d);
    ok(
        d,
        &[
            "toy",
            "gen",
            "--spec",
            "task.json",
            "--n",
            "200",
            "--distort",
            "sharp.json",
            "--logs-out",
            "val.jsonl",
        ],
    );
    let line = ok(
        d,
        &[
            "fit",
            "--logs",
            "val.jsonl",
            "--mode",
            "variable",
            "--max-epochs",
            "200",
            "--params-out",
            "v.json",
        ],
    );
    assert!(line.starts_with("fit variable:"), "{line}");
    let p = json(d.join("v.json"));
    assert_eq!(p["mode"], "variable");
    assert_eq!(p["g_net"]["weights"].as_array().unwrap().len(), 3);
    let f = json(d.join("seqcal-out/fit.json"));
    assert!(f["nll"].as_f64().unwrap() <= f["initial_nll"].as_f64().unwrap());
    ok(
        d,
        &[
            "apply",
            "--logs",
            "val.jsonl",
            "--params",
            "v.json",
            "--logs-out",
            "cal.jsonl",
        ],
    );
}

fn pipeline(dir: &Path, seed_args: &[&str], threads: &str, env_seed: Option<&str>) -> Vec<(String, Vec<u8>)> {
    let run = |args: &[&str]| {
        let mut full: Vec<&str> = seed_args.to_vec();
        full.extend(["--threads", threads]);
        full.extend(args);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqcal"));
        cmd.current_dir(dir).env_remove("SEQCAL_SEED").args(&full);
        if let Some(s) = env_seed {
            cmd.env("SEQCAL_SEED", s);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    toy_files(dir);
    let mut stdout = Vec::new();
    stdout.extend(run(&[
        "toy",
        "gen",
        "--spec",
        "task.json",
        "--n",
        "150",
        "--distort",
        "sharp.json",
        "--logs-out",
        "val.jsonl",
    ]));
    stdout.extend(run(&[
        "fit",
        "--logs",
        "val.jsonl",
        "--mode",
        "variable",
        "--max-epochs",
        "40",
        "--params-out",
        "v.json",
    ]));
    stdout.extend(run(&[
        "apply",
        "--logs",
        "val.jsonl",
        "--params",
        "v.json",
        "--logs-out",
        "cal.jsonl",
    ]));
    stdout.extend(run(&["stats", "--logs", "cal.jsonl", "--weighted"]));
    stdout.extend(run(&[
        "seqcal",
        "--task",
        "task.json",
        "--model",
        "sharp.json",
        "--params",
        "v.json",
        "--samples",
        "10",
        "--n",
        "15",
    ]));
    stdout.extend(run(&[
        "toy",
        "beamsweep",
        "--spec",
        "task.json",
        "--distort",
        "sharp.json",
        "--beams",
        "1,2,4",
        "--n-eval",
        "30",
    ]));
    let mut files: Vec<(String, Vec<u8>)> = vec![("stdout".into(), stdout)];
    for name in ["val.jsonl", "v.json", "cal.jsonl"] {
        files.push((name.into(), fs::read(dir.join(name)).unwrap()));
    }
    let mut reports: Vec<_> = fs::read_dir(dir.join("seqcal-out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    reports.sort();
    for p in reports {
        files.push((p.file_name().unwrap().to_string_lossy().into(), fs::read(&p).unwrap()));
    }
    files
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b, c, e) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    let first = pipeline(a.path(), &["--seed", "5"], "1", None);
    assert_eq!(first, pipeline(b.path(), &["--seed", "5"], "1", None));
    // Thread count does not change any output.
    assert_eq!(first, pipeline(c.path(), &["--seed", "5"], "3", None));
    // The environment variable stands in for --seed.
    assert_eq!(first, pipeline(e.path(), &[], "1", Some("5")));
}

#[test]
fn different_seeds_differ() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    toy_files(d);
    ok(
        d,
        &[
            "--seed",
            "1",
            "toy",
            "gen",
            "--spec",
            "task.json",
            "--n",
            "20",
            "--logs-out",
            "a.jsonl",
        ],
    );
    ok(
        d,
        &[
            "--seed",
            "2",
            "toy",
            "gen",
            "--spec",
            "task.json",
            "--n",
            "20",
            "--logs-out",
            "b.jsonl",
        ],
    );
    assert_ne!(
        fs::read(d.join("a.jsonl")).unwrap(),
        fs::read(d.join("b.jsonl")).unwrap()
    );
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for args in [
        vec!["stats", "--logs", "x.jsonl", "--bogus"],
        vec![],
        vec!["stats"],
        vec!["stats", "--logs", "x.jsonl", "--bins", "0"],
        vec!["stats", "--logs", "x.jsonl", "--partition", "length:3"],
        vec![
            "fit",
            "--logs",
            "x.jsonl",
            "--mode",
            "sideways",
            "--params-out",
            "p.json",
        ],
        vec!["toy", "beamsweep", "--spec", "t.json", "--beams", "1,zero"],
    ] {
        let out = seqcal(d, &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error:") || err.contains("Usage:"), "{args:?}: {err}");
    }
    assert_eq!(seqcal(d, &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two_with_context() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let bad = APPENDIX.to_string() + "{\"seq_id\":\"c\",\"t\":1,\"vocab_size\":3,\"eos_id\":2,\"gold_id\":0,\"entries\":[[0,0.9]],\"rest_mass\":0.5}\n";
    write(d, "bad.jsonl", &bad);
    let out = seqcal(d, &["stats", "--logs", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl") && err.contains("line 3"), "{err}");

    let out = seqcal(d, &["stats", "--logs", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    // Variable fits need attention or features on every record.
    write(d, "appendix.jsonl", APPENDIX);
    let out = seqcal(
        d,
        &[
            "fit",
            "--logs",
            "appendix.jsonl",
            "--mode",
            "variable",
            "--params-out",
            "p.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t=1"));

    write(d, "p.json", r#"{"version":"v0","mode":"single","temperature":1.0}"#);
    let out = seqcal(
        d,
        &[
            "apply",
            "--logs",
            "appendix.jsonl",
            "--params",
            "p.json",
            "--logs-out",
            "o.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}
