//! Drives the `asid` binary: exit codes, report shapes and a small
//! train / ingest / index / query round trip.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn asid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asid"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = asid(dir, args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["fingerprint", "train-encoder", "build-index", "query", "evaluate", "selftest"] {
        assert!(text.contains(sub), "help lists {sub}");
    }
    ok(dir.path(), &["--version"]);
    ok(dir.path(), &["query", "--help"]);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&asid(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&asid(dir.path(), &[])), 1);
    // --index missing
    assert_eq!(
        code(&asid(dir.path(), &["query", "--db", "d", "--weights", "w", "--audio", "a.wav"])),
        1
    );
    assert_eq!(code(&asid(dir.path(), &["train-encoder", "--preset", "huge", "--synthetic", "2", "--out", "w"])), 1);
    std::fs::write(dir.path().join("bad.toml"), "seed = \"zero\"\n").unwrap();
    assert_eq!(code(&asid(dir.path(), &["--config", "bad.toml", "selftest"])), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = asid(dir.path(), &["fingerprint", "--weights", "missing.bin", "--audio", "x.wav", "--out", "f.json"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.bin"), "{err}");
}

#[test]
fn selftest_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap();
    ok(dir.path(), &["selftest", "--seed", "3", "--out", "a.json"]);
    ok(dir.path(), &["selftest", "--seed", "3", "--out", "b.json"]);
    assert_eq!(read("a.json"), read("b.json"));
    let report = read_json(&dir.path().join("a.json"));
    assert_eq!(report["seed"], 3);
    assert_eq!(report["passed"], true);

    // the sequential path gives the same checks; only the config hash moves
    ok(dir.path(), &["selftest", "--seed", "3", "--threads", "1", "--out", "c.json"]);
    let seq = read_json(&dir.path().join("c.json"));
    assert_eq!(seq["checks"], report["checks"]);
}

#[test]
fn gradcheck_passes_on_tiny_preset() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gradcheck", "--coords", "8", "--out", "g.json"]);
    let report = read_json(&dir.path().join("g.json"));
    let text = report.to_string();
    assert!(!text.contains("\"passed\":false"), "{text}");
}

#[test]
fn train_ingest_index_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tracks = ["--synthetic", "3", "--synthetic-seconds", "6"];
    let with = |head: &[&'static str]| [head, &tracks[..]].concat();

    ok(d, &with(&["train-encoder", "--preset", "tiny", "--steps", "2", "--batch-size", "2", "--out", "enc.bin"]));
    ok(
        d,
        &with(&[
            "train-classifier", "--weights", "enc.bin", "--epochs", "1", "--steps-per-epoch", "1",
            "--batch-size", "4", "--auroc-pairs", "4", "--out", "model.bin", "--report", "clf.json",
        ]),
    );
    assert_eq!(read_json(&d.join("clf.json"))["command"], "train-classifier");

    ok(d, &with(&["gen-pairs", "--count", "6", "--out", "pairs"]));
    let listed = std::fs::read_dir(d.join("pairs")).unwrap().count();
    // six query/reference WAV pairs plus the provenance report
    assert_eq!(listed, 13);

    ok(d, &["fingerprint", "--weights", "model.bin", "--audio-dir", "pairs", "--out", "fp.json", "--db", "db.bin"]);
    let fps = read_json(&d.join("fp.json"));
    let rows = fps.as_array().unwrap();
    assert_eq!(rows.len(), 12);
    for row in rows {
        assert!(row["song"].as_str().unwrap().starts_with("pair_"));
        assert!(row["offset"].as_f64().is_some());
        let v: Vec<f64> = row["fingerprint"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(v.len(), 16);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
    }

    ok(d, &["build-index", "--db", "db.bin", "--out", "idx.bin", "--nlist", "1", "--nbits", "1", "--m", "4"]);
    let args = [
        "query", "--index", "idx.bin", "--db", "db.bin", "--weights", "model.bin",
        "--audio", "pairs/pair_00000_query.wav", "--threshold", "0", "--out", "q.json",
    ];
    ok(d, &args);
    let q = read_json(&d.join("q.json"));
    let songs = q["result"]["matches"]["songs"].as_array().unwrap();
    // threshold 0 keeps every candidate, and an ingested file finds itself
    assert!(songs.iter().any(|s| s["song"] == "pair_00000_query"));
    let scores: Vec<f64> = songs.iter().map(|s| s["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");

    // weights from a different encoder are refused unless forced
    ok(d, &with(&["train-encoder", "--preset", "tiny", "--steps", "2", "--batch-size", "2", "--seed", "9", "--out", "other.bin"]));
    ok(
        d,
        &with(&[
            "train-classifier", "--weights", "other.bin", "--epochs", "1", "--steps-per-epoch", "1",
            "--batch-size", "4", "--auroc-pairs", "0", "--out", "other_model.bin",
        ]),
    );
    let mut mismatched = args[..args.len() - 2].to_vec();
    mismatched[6] = "other_model.bin";
    let out = asid(d, &mismatched);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different encoder"));
    ok(d, &[&["--force"], &mismatched[..]].concat());
}
