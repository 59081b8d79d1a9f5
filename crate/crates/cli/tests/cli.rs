use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[train]
epochs = 1
batch_size = 4
[train.model]
word_dim = 6
lstm_hidden = 3
width = 6
global_width = 6
gat_heads = 2
pool_heads = 2
history_layers = 1
history_heads = 2
stop_pool_heads = 2
[synth]
docs = 8
"#;

fn gosum(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gosum"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = gosum(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Synthetic corpus, labels and a one-epoch checkpoint in `dir`.
fn pipeline(dir: &Path) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(
        dir,
        &["--config", "tiny.toml", "synth", "--out", "corpus.jsonl"],
    );
    ok(
        dir,
        &[
            "oracle",
            "--corpus",
            "corpus.jsonl",
            "--out",
            "labels.jsonl",
            "--max-len",
            "3",
        ],
    );
    ok(
        dir,
        &[
            "--config",
            "tiny.toml",
            "train",
            "--corpus",
            "corpus.jsonl",
            "--labels",
            "labels.jsonl",
            "--out",
            "model.ckpt",
        ],
    );
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gosum(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(gosum(dir.path(), &["--version"]).status.code(), Some(0));
    let help = gosum(dir.path(), &["train", "--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("--labels"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = gosum(d, &["oracle", "--corpus", "x.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    assert_eq!(gosum(d, &["frobnicate"]).status.code(), Some(1));

    fs::write(d.join("bad.toml"), "[train]\nno_such_key = 3\n[nonsense]\n").unwrap();
    let out = gosum(d, &["--config", "bad.toml", "synth", "--out", "c.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        gosum(d, &["--config", "absent.toml", "synth", "--out", "c.jsonl"])
            .status
            .code(),
        Some(1)
    );

    ok(d, &["synth", "--docs", "3", "--out", "c.jsonl"]);
    let zero_beam = gosum(
        d,
        &[
            "oracle",
            "--corpus",
            "c.jsonl",
            "--out",
            "l.jsonl",
            "--beam-width",
            "2",
        ],
    );
    assert_eq!(zero_beam.status.code(), Some(1));
    let baseline = gosum(
        d,
        &[
            "evaluate",
            "--corpus",
            "c.jsonl",
            "--baseline",
            "best",
            "--out",
            "r.jsonl",
        ],
    );
    assert_eq!(baseline.status.code(), Some(1));
    let neither = gosum(d, &["evaluate", "--corpus", "c.jsonl", "--out", "r.jsonl"]);
    assert_eq!(neither.status.code(), Some(1));
    let cond = gosum(
        d,
        &[
            "ablate",
            "--train",
            "c.jsonl",
            "--eval",
            "c.jsonl",
            "--labels",
            "l.jsonl",
            "--condition",
            "louder",
            "--out",
            "a.json",
        ],
    );
    assert_eq!(cond.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = gosum(
        d,
        &["oracle", "--corpus", "missing.jsonl", "--out", "l.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    fs::write(d.join("broken.jsonl"), "{\"id\": 3\n").unwrap();
    assert_eq!(
        gosum(
            d,
            &["oracle", "--corpus", "broken.jsonl", "--out", "l.jsonl"]
        )
        .status
        .code(),
        Some(2)
    );

    ok(d, &["synth", "--docs", "3", "--out", "c.jsonl"]);
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = gosum(
        d,
        &[
            "extract",
            "--corpus",
            "c.jsonl",
            "--checkpoint",
            "junk.ckpt",
            "--out",
            "e.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(
        d,
        &[
            "extract",
            "--corpus",
            "corpus.jsonl",
            "--checkpoint",
            "model.ckpt",
            "--out",
            "extract.jsonl",
            "--threshold",
            "1.0",
            "--max-len",
            "2",
        ],
    );
    let lines: Vec<Value> = fs::read_to_string(d.join("extract.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert!(lines
        .iter()
        .all(|l| l["indices"].as_array().unwrap().len() == 2));

    ok(
        d,
        &[
            "evaluate",
            "--corpus",
            "corpus.jsonl",
            "--checkpoint",
            "model.ckpt",
            "--out",
            "eval.jsonl",
        ],
    );
    let report = json(&d.join("eval.jsonl.report.json"));
    assert_eq!(report["documents"], 8);
    assert_eq!(report["threshold"], 0.6);
    for key in ["r1", "r2", "rl", "mean_reward"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    ok(
        d,
        &[
            "evaluate",
            "--corpus",
            "corpus.jsonl",
            "--baseline",
            "oracle",
            "--labels",
            "labels.jsonl",
            "--out",
            "oracle.jsonl",
        ],
    );
    ok(
        d,
        &[
            "evaluate",
            "--corpus",
            "corpus.jsonl",
            "--baseline",
            "random",
            "--lengths-from",
            "extract.jsonl",
            "--out",
            "random.jsonl",
        ],
    );
    let oracle = json(&d.join("oracle.jsonl.report.json"))["mean_reward"]
        .as_f64()
        .unwrap();
    let random = json(&d.join("random.jsonl.report.json"));
    assert_eq!(random["mean_length"], 2.0);
    assert!(oracle > random["mean_reward"].as_f64().unwrap());

    let manifest = json(&d.join("model.ckpt.manifest.json"));
    assert_eq!(manifest["subcommand"], "train");
    assert_eq!(manifest["inputs"]["labels"], "labels.jsonl");
    assert_eq!(manifest["outputs"]["log"], "model.ckpt.log.jsonl");
    assert_eq!(manifest["config"]["train"]["model"]["width"], 6);
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert!(manifest["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    for artifact in [
        "corpus.jsonl",
        "labels.jsonl",
        "extract.jsonl",
        "eval.jsonl",
        "oracle.jsonl",
    ] {
        assert!(
            d.join(format!("{artifact}.manifest.json")).exists(),
            "{artifact}"
        );
    }

    let log = fs::read_to_string(d.join("model.ckpt.log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "mean_reward", "lr"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(
        d,
        &[
            "--config",
            "tiny.toml",
            "train",
            "--corpus",
            "corpus.jsonl",
            "--labels",
            "labels.jsonl",
            "--out",
            "again.ckpt",
            "--epochs",
            "2",
            "--lr",
            "0.001",
            "--top-k",
            "1",
            "--preset",
            "arxiv",
        ],
    );
    let sidecar = json(&d.join("again.ckpt.json"));
    let config = &sidecar["config"];
    assert_eq!(config["epochs"], 2);
    assert_eq!(config["batch_size"], 4);
    assert_eq!(config["learning_rate"], 0.001);
    assert_eq!(config["top_k"], 1);
    assert_eq!(config["threshold"], 0.45);
    assert_eq!(config["max_len"], 8);
    assert_eq!(config["model"]["width"], 6);
    assert_eq!(sidecar["step"], 4);
}

#[test]
fn extraction_defaults_come_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(
        d,
        &[
            "extract",
            "--corpus",
            "corpus.jsonl",
            "--checkpoint",
            "model.ckpt",
            "--out",
            "e.jsonl",
        ],
    );
    let manifest = json(&d.join("e.jsonl.manifest.json"));
    assert_eq!(manifest["config"]["threshold"], 0.6);
    assert_eq!(manifest["config"]["max_len"], 7);
    let out = gosum(
        d,
        &[
            "extract",
            "--corpus",
            "corpus.jsonl",
            "--checkpoint",
            "model.ckpt",
            "--out",
            "e.jsonl",
            "--threshold",
            "1.5",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn preprocess_normalises_and_writes_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--docs", "5", "--out", "raw.jsonl"]);
    ok(
        d,
        &[
            "preprocess",
            "--input",
            "raw.jsonl",
            "--out",
            "clean.jsonl",
            "--limit",
            "3",
            "--vocab",
            "vocab.json",
            "--vocab-cap",
            "20",
        ],
    );
    assert_eq!(
        fs::read_to_string(d.join("clean.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    let vocab = json(&d.join("vocab.json"));
    let tokens = vocab.as_array().unwrap();
    assert!(tokens.len() <= 22 && tokens.len() > 2);
}

#[test]
fn ablate_reports_every_condition() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(
        d,
        &[
            "--config",
            "tiny.toml",
            "ablate",
            "--train",
            "corpus.jsonl",
            "--eval",
            "corpus.jsonl",
            "--labels",
            "labels.jsonl",
            "--condition",
            "base",
            "--condition",
            "scramble:1.0",
            "--seeds",
            "1,2",
            "--out",
            "ab.json",
        ],
    );
    let reports = json(&d.join("ab.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["condition"], "base");
    assert_eq!(reports[1]["condition"], "scramble:1");
    assert_eq!(reports[1]["per_seed"].as_array().unwrap().len(), 2);
}

#[test]
fn in_process_entry_point_matches_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    let code = gosum_cli::run([
        "gosum",
        "synth",
        "--docs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(gosum_cli::run(["gosum", "synth"]), 1);
    ok(dir.path(), &["synth", "--docs", "2", "--out", "d.jsonl"]);
    assert_eq!(
        fs::read(&out).unwrap(),
        fs::read(dir.path().join("d.jsonl")).unwrap()
    );
}
