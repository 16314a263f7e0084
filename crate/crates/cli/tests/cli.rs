use std::path::Path;
use std::process::{Command, Output};

use segslu::nn::{Architecture, ModelWeights};

fn segslu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segslu")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = segslu(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_field(out: &str, column: &str) -> String {
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == column).unwrap();
    lines.next().unwrap().split(',').nth(i).unwrap().to_string()
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = segslu(&[
        "train",
        "--manifest",
        s(&dir.path().join("nope.csv")),
        "--weights",
        s(&dir.path().join("w.sluw")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest not found"));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(segslu(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(segslu(&["eval", "--manifest", "m.csv", "--weights", "w", "--cmvn", "both"]).status.code(), Some(2));
    assert_eq!(segslu(&[]).status.code(), Some(2));
}

#[test]
fn corrupt_weight_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.sluw");
    std::fs::write(&w, b"garbage").unwrap();
    let wav = dir.path().join("a.wav");
    std::fs::write(&wav, b"RIFF").unwrap();
    let out = segslu(&["classify", "--weights", s(&w), "--cmvn", "none", s(&wav)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fixed_seed_gives_identical_weight_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("toy");
    ok(&["gen-toy", "--out", s(&corpus), "--classes", "3", "--per-class", "8", "--seed", "4"]);
    let m = corpus.join("manifest.csv");
    let (a, b) = (dir.path().join("a.sluw"), dir.path().join("b.sluw"));
    for w in [&a, &b] {
        ok(&["train", "--manifest", s(&m), "--weights", s(w), "--epochs", "2", "--seed", "7"]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.sluw.cmvn")).unwrap(),
        std::fs::read(dir.path().join("b.sluw.cmvn")).unwrap()
    );
}

#[test]
fn untrained_weights_score_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("toy");
    ok(&["gen-toy", "--out", s(&corpus), "--per-class", "40", "--seed", "5"]);
    let w = dir.path().join("random.sluw");
    let labels: Vec<String> = (0..8).map(|c| format!("motif_{c}")).collect();
    let model = ModelWeights::<f32>::init(Architecture::standard(8), 99).unwrap();
    segslu::weights::save(&model, Some(&labels), &w).unwrap();
    let out = ok(&[
        "eval",
        "--manifest",
        s(&corpus.join("manifest.csv")),
        "--weights",
        s(&w),
        "--cmvn",
        "none",
    ]);
    let err: f64 = csv_field(&out, "error_rate").parse().unwrap();
    assert!((0.7..=1.0).contains(&err), "error rate {err}");
}

#[test]
fn toy_corpus_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("toy");
    let gen = ok(&["gen-toy", "--out", s(&corpus)]);
    assert_eq!(csv_field(&gen, "rows"), "800");
    assert_eq!(csv_field(&gen, "train"), "560");
    let m = corpus.join("manifest.csv");
    let w = dir.path().join("model.sluw");

    let metrics = ok(&["train", "--manifest", s(&m), "--weights", s(&w)]);
    assert!(metrics.starts_with("epoch,train_loss,val_loss,val_error_rate\n"));
    assert!(w.is_file() && dir.path().join("model.sluw.cmvn").is_file());
    let file_metrics = std::fs::read_to_string(dir.path().join("model.sluw.metrics.csv")).unwrap();
    assert_eq!(file_metrics, metrics);

    let eval = ok(&["eval", "--manifest", s(&m), "--weights", s(&w), "--cmvn", "global"]);
    let err: f64 = csv_field(&eval, "error_rate").parse().unwrap();
    assert!(err <= 0.05, "test error rate {err}");
    assert_eq!(csv_field(&eval, "total"), "120");

    let json: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--manifest", s(&m), "--weights", s(&w), "--format", "json"])).unwrap();
    assert_eq!(json["total"], 120);

    let wav = corpus.join("wav/motif_3_0000.wav");
    let full = ok(&["classify", "--weights", s(&w), s(&wav)]);
    assert_eq!(csv_field(&full, "label"), "motif_3");
    assert_eq!(csv_field(&full, "segments"), "1");
    let streamed = ok(&["classify", "--weights", s(&w), "--segment", "1", "--step", "0.25", s(&wav)]);
    assert_eq!(csv_field(&streamed, "label"), "motif_3");

    let sweep = ok(&["sweep", "--manifest", s(&m), "--weights", s(&w), "--format", "json"]);
    let sweep: serde_json::Value = serde_json::from_str(&sweep).unwrap();
    let rows = sweep["error_rates"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 6));
    let csv = ok(&["sweep", "--manifest", s(&m), "--weights", s(&w), "--segment", "1,2", "--step", "0.5"]);
    assert_eq!(csv.lines().count(), 3);

    let bench = ok(&["bench", "--weights", s(&w), "--repeats", "1"]);
    let lines: Vec<&str> = bench.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("full,"));
    assert!(lines[2].contains(",43,") && lines[3].contains(",25,"));
}
