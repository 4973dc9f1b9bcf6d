use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use disco::data::{save_conversations, Conversation, Turn};
use disco::eval::Qrels;
use disco::index::{write_trec, RunList};
use disco::pipeline::{cmd_evaluate, cmd_train, ExperimentManifest};
use disco::vocab::Vocabulary;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_disco"))
}

/// Five one-turn conversations; the last one is the held-out split.
fn fixture(dir: &Path) -> ExperimentManifest {
    let m = ExperimentManifest {
        base_dir: dir.to_path_buf(),
        ..ExperimentManifest::default()
    };
    std::fs::create_dir_all(dir.join("data")).unwrap();
    Vocabulary::new(["[SEP]", "a", "b"])
        .unwrap()
        .save(&m.resolve(&m.paths.vocab))
        .unwrap();
    let mut qrels = Qrels::new();
    let convs: Vec<Conversation> = (0..5)
        .map(|c| {
            qrels.insert(format!("c{c}_0"), format!("d{c}"), 1);
            qrels.insert(format!("c{c}_0"), format!("e{c}"), 2);
            Conversation {
                id: format!("c{c}"),
                turns: vec![Turn {
                    utterance: "a b".into(),
                    answer: String::new(),
                    rewrites: BTreeMap::new(),
                    relevant: vec![format!("d{c}")],
                }],
            }
        })
        .collect();
    save_conversations(&m.resolve(&m.paths.conversations), &convs).unwrap();
    qrels
        .write_trec(std::fs::File::create(m.resolve(&m.paths.qrels)).unwrap())
        .unwrap();
    m
}

#[test]
fn evaluating_a_perfect_run_gives_ones() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let runs_dir = m.out_dir().join("runs");
    std::fs::create_dir_all(&runs_dir).unwrap();
    let run = RunList::from_scores(
        "c4_0",
        "perfect",
        vec![("e4".into(), 2.0), ("d4".into(), 1.0), ("x".into(), 0.5)],
    )
    .unwrap();
    write_trec(
        std::fs::File::create(runs_dir.join("perfect.trec")).unwrap(),
        [&run],
    )
    .unwrap();
    let summary = cmd_evaluate(&m, "perfect").unwrap();
    assert_eq!(summary["queries"], 1);
    assert_eq!(summary["mrr"], 1.0);
    assert_eq!(summary["ndcg"], 1.0);
    assert_eq!(summary["recall"]["10"], 1.0);
    assert_eq!(summary["recall"]["100"], 1.0);
    assert!(m.out_dir().join("eval_perfect.csv").is_file());
}

#[test]
fn missing_upstream_artifact_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let err = cmd_train(&m).unwrap_err().to_string();
    assert!(err.contains("index.json"), "{err}");
}

#[test]
fn cli_reports_missing_files_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    std::fs::write(&manifest, "seed = 1\n").unwrap();
    let out = bin()
        .args(["index", "--manifest"])
        .arg(&manifest)
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocab.txt"));

    let out = bin()
        .args(["train", "--manifest", "does-not-exist.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does-not-exist.toml"));
}

#[test]
fn invalid_config_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    std::fs::write(
        &manifest,
        "[train]\nlearning_rate = -1.0\n[synth]\nvocab_size = 400\n",
    )
    .unwrap();
    let out = bin()
        .args(["synth", "--manifest"])
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!dir.path().join("out").exists());
    assert!(!dir.path().join("data").exists());
}
