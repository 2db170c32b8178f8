use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn structrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structrans"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run structrans")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(structrans(&["generate-data", "--setup", "B", "--seed", "4", "--out", p(out)]).status.success());
    }
    for split in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        let x = fs::read(a.join(split)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(split)).unwrap(), "{split}");
    }
}

#[test]
fn evaluate_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    structrans(&["generate-data", "--setup", "A", "--out", p(dir.path())]);
    let dev = dir.path().join("dev.jsonl");
    let out = structrans(&["evaluate", "--pred", p(&dev), "--gold", p(&dev)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), r#"{"exact_match":1.0}"#);
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = structrans(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    assert!(!ckpt.exists());
}

#[test]
fn train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ex = |s: &str| {
        let src: Vec<&str> = s.split(' ').collect();
        let tgt: Vec<&str> = src.iter().chain(src.iter().rev()).copied().collect();
        serde_json::json!({"source": src, "target": tgt}).to_string()
    };
    let train: Vec<String> = ["a b", "b a", "a a", "b b", "a", "b"].iter().map(|s| ex(s)).collect();
    fs::write(d.join("train.jsonl"), train.join("\n")).unwrap();
    fs::write(d.join("dev.jsonl"), train[..2].join("\n")).unwrap();
    let cfg = serde_json::json!({
        "model": {"embedding_dim": 8, "fertility_hidden": 6, "reorder_hidden": 4, "decoder_hidden": 4, "mlp_hidden": 8, "max_fertility": 2},
        "train": {"epochs": 2, "seed": 3}
    });
    fs::write(d.join("cfg.json"), cfg.to_string()).unwrap();
    let ckpt = d.join("m.ckpt");
    let out = structrans(&["train", "--config", p(&d.join("cfg.json")), "--data", p(d), "--out", p(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(d.join("m.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    fs::write(d.join("g.cfg"), "%start S\nS -> A A\nA -> 'a'\n").unwrap();
    let dev = d.join("dev.jsonl");
    for grammar in [None, Some("g.cfg")] {
        let pred = d.join("pred.jsonl");
        let mut args = vec!["predict", "--ckpt", p(&ckpt), "--input", p(&dev), "--out", p(&pred)];
        let g = grammar.map(|g| d.join(g));
        if let Some(g) = &g {
            args.extend(["--grammar", p(g)]);
        }
        assert!(structrans(&args).status.success());
        let lines: Vec<serde_json::Value> = fs::read_to_string(&pred)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        if grammar.is_some() {
            for l in &lines {
                assert_eq!(l["prediction"], serde_json::json!(["a", "a"]));
            }
        }
        let eval = structrans(&["evaluate", "--pred", p(&pred), "--gold", p(&dev)]);
        assert!(eval.status.success());
    }
}

#[test]
fn unknown_token_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("train.jsonl"), r#"{"source":["a"],"target":["a","a"]}"#).unwrap();
    fs::write(d.join("dev.jsonl"), r#"{"source":["a"],"target":["a","a"]}"#).unwrap();
    fs::write(d.join("cfg.json"), r#"{"train": {"epochs": 1}}"#).unwrap();
    let ckpt = d.join("m.ckpt");
    assert!(structrans(&["train", "--config", p(&d.join("cfg.json")), "--data", p(d), "--out", p(&ckpt)]).status.success());
    fs::write(d.join("in.jsonl"), r#"{"source":["z"]}"#).unwrap();
    let out = structrans(&["predict", "--ckpt", p(&ckpt), "--input", p(&d.join("in.jsonl")), "--out", p(&d.join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('z'));
}

#[test]
fn checks_exit_cleanly() {
    let out = structrans(&["gradcheck", "--instances", "3", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.starts_with("PASS")));
    let out = structrans(&["oracle-check", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
