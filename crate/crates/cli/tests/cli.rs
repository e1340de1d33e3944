use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_pht");

fn bundled_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_corpus.jsonl")
}

fn pht(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("PHT_SEED")
        .output()
        .expect("spawn pht")
}

fn ok(args: &[&str]) -> Output {
    let out = pht(args);
    assert!(
        out.status.success(),
        "pht {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn bundled_corpus_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.jsonl");
    ok(&["gen-toy-corpus", "--out", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(bundled_corpus()).unwrap());
}

#[test]
fn seed_variable_changes_the_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["gen-toy-corpus", "--out", s(&a), "--samples", "3"]);
    let out = Command::new(BIN)
        .args(["gen-toy-corpus", "--out", s(&b), "--samples", "3"])
        .env("PHT_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn full_pipeline_on_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = bundled_corpus();
    let vocab = d.join("vocab.json");
    let run = d.join("run");
    ok(&[
        "build-vocab",
        "--corpus",
        s(&corpus),
        "--size",
        "1000",
        "--out",
        s(&vocab),
    ]);

    let config = d.join("run.toml");
    std::fs::write(&config, "schema_version = 1\nwarmup_steps = 50\nbatch_size = 8\n").unwrap();
    ok(&[
        "train",
        "--vocab",
        s(&vocab),
        "--train",
        s(&corpus),
        "--valid",
        s(&corpus),
        "--out-dir",
        s(&run),
        "--preset",
        "tiny",
        "--config",
        s(&config),
        "--steps",
        "200",
        "--checkpoint-every",
        "100",
        "--seed",
        "1",
    ]);
    let best: Value = serde_json::from_str(&std::fs::read_to_string(run.join("best.json")).unwrap()).unwrap();
    let first = run.join("ckpt-00000100.bin");
    assert!(first.exists() && run.join("ckpt-00000100.toml").exists());

    // Resuming the first checkpoint to step 200 reproduces the uninterrupted run.
    let resumed = d.join("resumed");
    ok(&[
        "train",
        "--vocab",
        s(&vocab),
        "--train",
        s(&corpus),
        "--valid",
        s(&corpus),
        "--out-dir",
        s(&resumed),
        "--preset",
        "tiny",
        "--config",
        s(&config),
        "--steps",
        "200",
        "--checkpoint-every",
        "100",
        "--seed",
        "1",
        "--resume",
        s(&first),
    ]);
    assert_eq!(
        std::fs::read(run.join("ckpt-00000200.bin")).unwrap(),
        std::fs::read(resumed.join("ckpt-00000200.bin")).unwrap()
    );

    let model = PathBuf::from(best["checkpoint"].as_str().unwrap());
    let labels = d.join("labels.jsonl");
    let predictor = d.join("predictor.bin");
    ok(&[
        "extract-labels",
        "--model",
        s(&model),
        "--vocab",
        s(&vocab),
        "--data",
        s(&corpus),
        "--out",
        s(&labels),
    ]);
    assert_eq!(jsonl(&labels).len(), 20);
    ok(&[
        "train-align",
        "--model",
        s(&model),
        "--vocab",
        s(&vocab),
        "--data",
        s(&corpus),
        "--labels",
        s(&labels),
        "--out",
        s(&predictor),
        "--steps",
        "100",
    ]);

    let gens = d.join("gen.jsonl");
    ok(&[
        "summarize",
        "--model",
        s(&model),
        "--vocab",
        s(&vocab),
        "--data",
        s(&corpus),
        "--predictor",
        s(&predictor),
        "--out",
        s(&gens),
        "--scorer",
        "attalign",
        "--beam",
        "3",
        "--compress-s",
        "2",
        "--threads",
        "3",
    ]);
    let records = jsonl(&gens);
    assert_eq!(records.len(), 20);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["id"], format!("toy-{i:04}"));
        assert!(r["kept_paragraphs"].as_array().unwrap().len() <= 2);
        assert!(r["eta_hat"].is_array());
    }

    let report = d.join("report.json");
    ok(&[
        "evaluate",
        "--generations",
        s(&gens),
        "--data",
        s(&corpus),
        "--vocab",
        s(&vocab),
        "--model",
        s(&model),
        "--out",
        s(&report),
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["samples"], 20);
    let r1 = report["mean_rouge_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    assert!(report["mean_attention_cosine"].is_f64());
}

#[test]
fn rejects_mismatched_vocabulary_and_missing_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = bundled_corpus();
    let vocab = d.join("vocab.json");
    let other = d.join("other.json");
    let run = d.join("run");
    ok(&[
        "build-vocab",
        "--corpus",
        s(&corpus),
        "--size",
        "1000",
        "--out",
        s(&vocab),
    ]);
    ok(&[
        "build-vocab",
        "--corpus",
        s(&corpus),
        "--size",
        "150",
        "--out",
        s(&other),
    ]);
    ok(&[
        "train",
        "--vocab",
        s(&vocab),
        "--train",
        s(&corpus),
        "--out-dir",
        s(&run),
        "--preset",
        "tiny",
        "--steps",
        "2",
    ]);
    let model = run.join("ckpt-00000002.bin");
    let gens = d.join("gen.jsonl");

    let out = pht(&[
        "summarize",
        "--model",
        s(&model),
        "--vocab",
        s(&other),
        "--data",
        s(&corpus),
        "--out",
        s(&gens),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary mismatch"));

    let out = pht(&[
        "summarize",
        "--model",
        s(&model),
        "--vocab",
        s(&vocab),
        "--data",
        s(&corpus),
        "--out",
        s(&gens),
        "--scorer",
        "attalign",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("predictor"));

    let bad = d.join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\nmodel_dims = 8\n").unwrap();
    let out = pht(&[
        "train",
        "--vocab",
        s(&vocab),
        "--train",
        s(&corpus),
        "--out-dir",
        s(&run),
        "--config",
        s(&bad),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}
