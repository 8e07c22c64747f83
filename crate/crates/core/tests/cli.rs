use std::path::Path;
use std::process::{Command, Output};

use fcbm::io::{default_embeddings_path, write_concept_set, ConceptSet};
use fcbm::numeric::{Matrix, Rng};
use fcbm::pipeline::fresh_clip_values;
use fcbm::synthetic::{paraphrase, SyntheticConfig, SyntheticTask};
use fcbm::trainer::{train_head, HeadData, TrainConfig};
use fcbm::{load_checkpoint, save_checkpoint};
use serde_json::Value;

fn fcbm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcbm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fcbm(dir, args);
    assert!(
        out.status.success(),
        "fcbm {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic data, a reworded pool, a projector and a short-trained head.
fn trained_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let task = SyntheticTask::generate(SyntheticConfig::default()).unwrap();
    task.write(dir.path()).unwrap();
    let reworded = paraphrase(&task.concepts, 0.1, 0).unwrap();
    let names = dir.path().join("reworded.txt");
    write_concept_set(&reworded, &names, default_embeddings_path(&names)).unwrap();
    ok(
        dir.path(),
        &["train-projector", "--manifest", "train.json", "--concepts", "concepts.txt", "--out", "proj.fcbm", "--epochs", "200"],
    );
    ok(
        dir.path(),
        &[
            "train-head", "--manifest", "train.json", "--concepts", "concepts.txt", "--projector", "proj.fcbm",
            "--out", "head.fcbm", "--epochs", "200", "--nec-threshold", "6", "--hidden", "32",
        ],
    );
    dir
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = fcbm(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error(usage)"));
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = fcbm(dir.path(), &["nec", "--checkpoint", "absent.fcbm"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error(io)"));
}

#[test]
fn eval_and_swap_on_the_training_pool_agree() {
    let dir = trained_dir();
    let p = dir.path();
    let json = |args: &[&str]| -> Value { serde_json::from_str(&ok(p, args)).unwrap() };
    let eval = json(&["--json", "eval", "--manifest", "test.json", "--checkpoint", "head.fcbm"]);
    let swap = json(&[
        "--json", "swap-concepts", "--checkpoint", "head.fcbm", "--new-concepts", "concepts.txt", "--manifest", "test.json",
    ]);
    assert_eq!(eval["accuracy"], swap["accuracy"]);
    assert_eq!(eval["nec"], swap["nec"]);
    assert!(eval["accuracy"].as_f64().unwrap() > 0.9);

    let eval_swap = json(&[
        "--json", "eval", "--manifest", "test.json", "--checkpoint", "head.fcbm", "--concepts", "concepts.txt", "--swap",
    ]);
    assert_eq!(eval_swap["accuracy"], swap["accuracy"]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = trained_dir();
    let b = trained_dir();
    for file in ["proj.fcbm", "proj.fcbm.log.jsonl", "head.fcbm", "head.fcbm.log.jsonl"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
    let args = ["explain", "--checkpoint", "head.fcbm", "--manifest", "test.json", "--sample", "5"];
    assert_eq!(ok(a.path(), &args), ok(b.path(), &args));
}

#[test]
fn nec_of_a_crafted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let task = SyntheticTask::generate(SyntheticConfig {
        classes: 2,
        ..Default::default()
    })
    .unwrap();
    let mut rng = Rng::new(5);
    let pool = ConceptSet::new(
        vec!["a".into(), "b".into(), "c".into()],
        rng.normal_matrix(3, task.concepts.dim(), 1.0).round_to_f32(),
    )
    .unwrap();
    let values = fresh_clip_values(&pool, &task.train.clip).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        hidden: 8,
        ..TrainConfig::default()
    };
    let data = HeadData {
        values: &values.values,
        labels: &task.train.labels,
        num_classes: 2,
    };
    let (mut ckpt, _) = train_head(&data, &pool, values.stats, &cfg).unwrap().into_result().unwrap();
    ckpt.weights = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]]);
    save_checkpoint(&ckpt, dir.path().join("crafted.fcbm")).unwrap();

    assert_eq!(ok(dir.path(), &["nec", "--checkpoint", "crafted.fcbm"]), "NEC: 1.5\n");
    let v: Value = serde_json::from_str(&ok(dir.path(), &["--json", "nec", "--checkpoint", "crafted.fcbm"])).unwrap();
    assert_eq!(v["nec"], 1.5);
}

#[test]
fn zero_epoch_finetune_leaves_the_head_unchanged() {
    let dir = trained_dir();
    ok(
        dir.path(),
        &[
            "finetune", "--checkpoint", "head.fcbm", "--new-concepts", "reworded.txt", "--manifest", "train.json",
            "--out", "tuned.fcbm", "--epochs", "0",
        ],
    );
    let before = load_checkpoint(dir.path().join("head.fcbm")).unwrap();
    let after = load_checkpoint(dir.path().join("tuned.fcbm")).unwrap();
    assert_eq!(before.hypernet, after.hypernet);
    assert_eq!(before.tau, after.tau);
    assert!(after.finetuned);
    assert_ne!(before.fingerprint, after.fingerprint);
}

#[test]
fn finetuned_head_evaluates_on_its_new_pool() {
    let dir = trained_dir();
    let p = dir.path();
    ok(
        p,
        &[
            "finetune", "--checkpoint", "head.fcbm", "--new-concepts", "reworded.txt", "--manifest", "train.json",
            "--out", "tuned.fcbm",
        ],
    );
    let v: Value = serde_json::from_str(&ok(
        p,
        &["--json", "eval", "--manifest", "test.json", "--checkpoint", "tuned.fcbm", "--concepts", "reworded.txt"],
    ))
    .unwrap();
    assert!(v["accuracy"].as_f64().unwrap() > 0.9);
    assert_eq!(v["mode"], "swap");
}

#[test]
fn explain_writes_csv_with_header() {
    let dir = trained_dir();
    ok(
        dir.path(),
        &[
            "explain", "--checkpoint", "head.fcbm", "--manifest", "test.json", "--sample", "0", "--format", "csv",
            "--topk", "3", "--out", "e.csv",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("sample,predicted_class,true_class,rank,concept"));
    assert!(lines.len() >= 2 && lines.len() <= 4);
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--instances", "10", "--seed", "3"]);
    assert_eq!(out.lines().filter(|l| l.ends_with("ok")).count(), 6, "{out}");
}
