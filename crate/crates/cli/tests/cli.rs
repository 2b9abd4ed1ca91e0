use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_mlp4str");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/fixture60.jsonl")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ingest(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    ok(&["ingest", "--jsonl", s(&fixture()), "--out", s(&corpus)]);
    corpus
}

fn train(corpus: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--corpus", s(corpus), "--out", s(out), "--max-epochs", "15", "--d-h", "64"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn train_then_eval_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let corpus = ingest(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&["train", "--corpus", s(&corpus), "--out", s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), s(&ckpt));

    let prefix = dir.path().join("report");
    let out = ok(&[
        "eval",
        "--corpus",
        s(&corpus),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&prefix),
        "--modes",
        "full,no_mixer_pooling",
    ]);
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
    assert!(String::from_utf8(out.stdout).unwrap().contains("P@1"));

    let tsv = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "mode\tk\tprecision\trecall\tf1\tn_evaluated");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert_eq!(row[5], "5");
        for v in &row[2..5] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=100.0).contains(&x), "{row:?}");
        }
    }

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("model.ckpt.json")).unwrap()).unwrap();
    assert_eq!(report["config"], sidecar["run"]);
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn recommend_known_and_unknown_user() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingest(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let tags_emb = dir.path().join("tags.emb");
    train(&corpus, &ckpt, &["--tags-emb", s(&tags_emb)]);
    let dump = std::fs::read(&tags_emb).unwrap();
    assert_eq!(&dump[..12], b"MLP4STREMB1\0");
    let n_tags = std::fs::read_to_string(corpus.join("tag_vocab.tsv")).unwrap().lines().count();
    assert_eq!(u32::from_le_bytes(dump[12..16].try_into().unwrap()) as usize, n_tags);
    assert_eq!(u32::from_le_bytes(dump[16..20].try_into().unwrap()), 64);

    let out = ok(&[
        "recommend",
        "--corpus",
        s(&corpus),
        "--checkpoint",
        s(&ckpt),
        "--user",
        "user0002",
        "--title",
        "topic1w0 topic1w1",
        "--body",
        "w12 w40",
        "--b",
        "2",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let tags = v["tags"].as_array().unwrap();
    assert_eq!(tags.len(), 2);
    let scores: Vec<f64> = tags.iter().map(|t| t["score"].as_f64().unwrap()).collect();
    assert!(scores[0] >= scores[1]);
    assert!(scores.iter().all(|p| (0.0..=1.0).contains(p)));

    let out = run(&[
        "recommend",
        "--corpus",
        s(&corpus),
        "--checkpoint",
        s(&ckpt),
        "--user",
        "nobody42",
        "--title",
        "x",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nobody42"));
}

#[test]
fn gradcheck_is_repeatable() {
    let a = ok(&["gradcheck", "--seed", "7"]);
    let b = ok(&["gradcheck", "--seed", "7"]);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8(a.stdout).unwrap().contains("PASS"));
}

#[test]
fn gradcheck_failure_exits_3() {
    let out = run(&["gradcheck", "--tolerance", "1e-30"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_codes_for_usage_and_data_errors() {
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let out = run(&["train", "--corpus", s(&missing), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));

    let corpus = ingest(dir.path());
    let out = run(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&dir.path().join("m")),
        "--set",
        "train.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingest(dir.path());
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"train": {"seed": 11, "max_epochs": 2}, "mixer": {"d_h": 16, "u": 3}}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&ckpt),
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--set",
        "mixer.u=2",
    ]);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.ckpt.json")).unwrap()).unwrap();
    let run = &meta["run"];
    assert_eq!(run["train"]["seed"], 5);
    assert_eq!(run["train"]["max_epochs"], 2);
    assert_eq!(run["mixer"]["d_h"], 16);
    assert_eq!(run["mixer"]["u"], 2);
    assert_eq!(run["train"]["learning_rate"], 1e-3);
}

#[test]
fn train_and_eval_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingest(dir.path());
    let mut reports = Vec::new();
    let mut blobs = Vec::new();
    for name in ["a", "b"] {
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        train(&corpus, &ckpt, &["--seed", "9"]);
        let prefix = dir.path().join(format!("{name}-report"));
        ok(&["eval", "--corpus", s(&corpus), "--checkpoint", s(&ckpt), "--out", s(&prefix)]);
        blobs.push(std::fs::read(&ckpt).unwrap());
        reports.push(std::fs::read(dir.path().join(format!("{name}-report.tsv"))).unwrap());
    }
    assert_eq!(blobs[0], blobs[1]);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn split_and_sweep_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = ingest(dir.path());
    let split = dir.path().join("split.json");
    ok(&["split", "--corpus", s(&corpus), "--out", s(&split)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&split).unwrap()).unwrap();
    assert_eq!(v["test"].as_array().unwrap().len(), 5);

    let tsv = dir.path().join("sweep.tsv");
    ok(&[
        "sweep",
        "--corpus",
        s(&corpus),
        "--u-values",
        "1,3",
        "--out",
        s(&tsv),
        "--max-epochs",
        "3",
        "--d-h",
        "16",
    ]);
    let text = std::fs::read_to_string(&tsv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "u\tf1@5");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1\t"));
}

#[test]
fn gen_synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        ok(&["gen-synth", "--out", s(p), "--users", "3", "--posts-per-user", "4", "--seed", "1"]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 12);
    assert_eq!(run(&["gen-synth", "--out", s(&a), "--carry", "2"]).status.code(), Some(1));
}
