use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn slpgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slpgen")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = slpgen(args);
    assert!(out.status.success(), "slpgen {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ply_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.extension().is_some_and(|x| x == "ply"))
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = dir.join("data");
    let (ae, pos, feat) = (dir.join("ae.slpc"), dir.join("pos.slpc"), dir.join("feat.slpc"));

    ok(&["gen-data", "--out", p(&data), "--per-family", "2", "--points", "32", "--seed", "3"]);
    ok(&["train-ae", "--data", p(&data), "--out", p(&ae), "--model", "toy", "--epochs", "2", "--log", p(&dir.join("ae.jsonl"))]);
    let log = fs::read_to_string(dir.join("ae.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["total"].is_number()));
    for (stage, out) in [("pos", &pos), ("feat", &feat)] {
        ok(&["train-latent", "--stage", stage, "--data", p(&data), "--ae", p(&ae), "--out", p(out), "--epochs", "2", "--steps", "10"]);
    }

    let models = ["--ae", p(&ae), "--pos", p(&pos), "--feat", p(&feat)];
    let (s1, s2) = (dir.join("s1"), dir.join("s2"));
    ok(&[&["sample", "--count", "2", "--seed", "7", "--out", p(&s1)], &models[..]].concat());
    ok(&[&["sample", "--count", "2", "--seed", "7", "--out", p(&s2)], &models[..]].concat());
    let (a, b) = (ply_files(&s1), ply_files(&s2));
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);

    let report = ok(&["eval", "--gen", p(&s1), "--ref", p(&s2), "--metric", "cd", "--metric", "nc", "--json"]);
    let report: Value = serde_json::from_str(&report).unwrap();
    let report = report.as_array().unwrap();
    assert_eq!(report[0]["mmd"].as_f64().unwrap(), 0.0);
    // Unit normals are unit only to f32 rounding, so NC of a cloud with itself is ~1e-8.
    assert!(report[1]["mmd"].as_f64().unwrap() < 1e-6);
    assert!(report.iter().all(|r| r["cov"].as_f64().unwrap() == 1.0));
    let table = ok(&["eval", "--gen", p(&s1), "--ref", p(&s2)]);
    assert!(table.contains("1-NN") || table.to_lowercase().contains("mmd"), "{table}");

    // PLY -> JSON -> PLY keeps the bytes.
    let (js, back) = (dir.join("json"), dir.join("back"));
    ok(&["export", "--input", p(&s1), "--format", "json", "--out", p(&js)]);
    ok(&["export", "--input", p(&js), "--format", "ply", "--out", p(&back)]);
    assert_eq!(ply_files(&back), a);
}

#[test]
fn bad_input_exits_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["train-ae", "--out", "x.slpc"],
        vec!["eval", "--gen", "x", "--ref", "y", "--metric", "psnr"],
        vec!["eval", "--gen", p(tmp.path()), "--ref", "/does/not/exist"],
        vec!["sample", "--count", "0", "--ae", "a", "--pos", "b", "--feat", "c", "--out", "d"],
        vec!["gen-data", "--out", p(tmp.path()), "--val-fraction", "1.5"],
    ] {
        let out = slpgen(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
}
