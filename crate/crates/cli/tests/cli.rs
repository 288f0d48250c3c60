use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vqlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = vqlab(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    vqlab(args, cwd).status.code().unwrap()
}

const TINY_DATA: &str =
    r#"{"generator": {"feature_dim": 8}, "splits": {"train": 160, "val": 24, "test": 24}}"#;
const TINY_TRAIN: &str = r#"{"embed_dim": 16, "n_layers": 1, "n_heads": 2, "context_limit": 16, "rationale_len": 4,
    "epochs": 3, "batch_size": 16, "learning_rate": 0.003}"#;

fn prepare(dir: &Path) {
    fs::write(dir.join("data.json"), TINY_DATA).unwrap();
    fs::write(dir.join("train.json"), TINY_TRAIN).unwrap();
    ok(&["generate", "--config", "data.json", "--out", "raw"], dir);
    ok(&["curate", "--raw", "raw", "--out", "cur"], dir);
}

#[test]
fn usage_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"], d.path()), 0);
    assert_eq!(code(&["bogus"], d.path()), 1);
    assert_eq!(code(&["eval", "--frobnicate"], d.path()), 1);
    assert_eq!(code(&["generate", "--set", "novalue"], d.path()), 1);
    assert_eq!(
        code(&["mask", "--label", "37", "--mode", "sideways"], d.path()),
        1
    );
}

#[test]
fn validation_and_runtime_errors() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    // Label out of range is a validation error.
    assert_eq!(code(&["mask", "--label", "55"], p), 1);
    // Unknown config key.
    assert_eq!(
        code(
            &["generate", "--set", "generator.colour=1", "--out", "x"],
            p
        ),
        1
    );
    fs::write(p.join("a.csv"), "item_id,score\na,1\nb,2\n").unwrap();
    fs::write(p.join("b.csv"), "item_id,score\na,1\nc,2\n").unwrap();
    assert_eq!(code(&["eval", "--pred", "a.csv", "--truth", "b.csv"], p), 1);
    // A missing input file is an environment problem.
    assert_eq!(
        code(&["eval", "--pred", "missing.csv", "--truth", "b.csv"], p),
        2
    );
}

#[test]
fn mask_shows_score_positions() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["mask", "--label", "37", "--rationale-len", "2"], d.path());
    assert!(out.contains('3') && out.contains('7'), "{out}");
}

#[test]
fn eval_prints_metrics() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("t.csv"), "item_id,score\na,1\nb,2\nc,3\n").unwrap();
    fs::write(p.join("p.csv"), "item_id,score\nc,4\nb,2\na,1\n").unwrap();
    let out = ok(&["eval", "--pred", "p.csv", "--truth", "t.csv"], p);
    assert!(out.contains("srcc  1.000000"), "{out}");
    // 3 / sqrt(84/9)
    assert!(out.contains("plcc  0.981981"), "{out}");
    let json = ok(
        &["eval", "--pred", "p.csv", "--truth", "t.csv", "--json"],
        p,
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v[0]["display"]["srcc"], "1.00");
}

#[test]
fn ensemble_default_weights() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["ensemble"], d.path());
    assert!(
        out.contains(
            "int-r32=0.25 int-r128=0.15 int-medium-r128=0.25 int-large-r128=0.1 grade-head=0.25"
        ),
        "{out}"
    );
}

#[test]
fn pipeline_generate_curate_train_eval_ensemble() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    prepare(p);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert!(p.join("raw").join(f).exists(), "{f}");
    }
    assert!(p.join("cur/truth_test.csv").exists());
    let out = ok(
        &[
            "train",
            "--config",
            "train.json",
            "--data",
            "cur",
            "--out",
            "run",
            "--seed",
            "4",
        ],
        p,
    );
    assert!(out.contains("best epoch"), "{out}");
    for f in [
        "history.csv",
        "best.ckpt",
        "preds_test.csv",
        "manifest.json",
        "checkpoints/epoch-3.ckpt",
    ] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"][0], 4);
    assert_eq!(manifest["config"]["epochs"], 3);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 3);

    ok(
        &[
            "eval",
            "--pred",
            "run/preds_test.csv",
            "--truth",
            "cur/truth_test.csv",
        ],
        p,
    );

    let members = [
        "--member=int-r32=run/preds_test.csv",
        "--member=int-r128=run/preds_test.csv",
        "--member=int-medium-r128=run/preds_test.csv",
        "--member=int-large-r128=run/preds_test.csv",
        "--member=grade-head=run/preds_test.csv",
    ];
    let spec = r#"{"members": [
        {"id": "int-r32", "weight": 0.25, "scale": "mos1_to5"},
        {"id": "int-r128", "weight": 0.15, "scale": "mos1_to5"},
        {"id": "int-medium-r128", "weight": 0.25, "scale": "mos1_to5"},
        {"id": "int-large-r128", "weight": 0.1, "scale": "mos1_to5"},
        {"id": "grade-head", "weight": 0.25, "scale": "mos1_to5"}]}"#;
    fs::write(p.join("spec.json"), spec).unwrap();
    let mut args = vec![
        "ensemble",
        "--spec",
        "spec.json",
        "--out",
        "ens.csv",
        "--truth",
        "cur/truth_test.csv",
    ];
    args.extend(members);
    ok(&args, p);
    // Identical members: the ensemble equals each of them.
    let a = vqlab_core::ScoreVector::read_csv(&p.join("ens.csv")).unwrap();
    let b = vqlab_core::ScoreVector::read_csv(&p.join("run/preds_test.csv")).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.sorted().values().iter().zip(b.sorted().values()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ablate_and_report() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let study = format!(
        r#"{{"dataset": {TINY_DATA}, "train": {TINY_TRAIN}, "grid": {{"sizes": [
            {{"name": "small", "embed_dim": 8, "n_layers": 1, "n_heads": 2}},
            {{"name": "medium", "embed_dim": 16, "n_layers": 1, "n_heads": 2}}], "lora_r": [2, 4]}}}}"#
    );
    fs::write(p.join("study.json"), study).unwrap();
    let out = ok(
        &[
            "ablate",
            "--config",
            "study.json",
            "--seeds",
            "1,2",
            "--out",
            "st",
            "--grid",
        ],
        p,
    );
    assert!(
        out.contains("integer_masked") && out.contains("ordering"),
        "{out}"
    );
    let csv = fs::read_to_string(p.join("st/ablation.csv")).unwrap();
    let names: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "not_finetuned",
            "decimal_full",
            "integer_full",
            "integer_masked",
            "grade_head"
        ]
    );
    let per_seed = fs::read_to_string(p.join("st/ablation_per_seed.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 1 + 5 * 2);
    assert_eq!(
        fs::read_to_string(p.join("st/grid/size_grid.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    for arm in ["decimal_full", "integer_full", "integer_masked"] {
        for seed in ["1", "2"] {
            let run = p.join("st/runs").join(arm).join(seed);
            assert!(run.join("history.csv").exists() && run.join("preds.csv").exists());
        }
    }
    let report = ok(&["report", "--dir", "st", "--places", "2"], p);
    assert!(
        report.contains("Label-mode ablation") && report.contains("Model size"),
        "{report}"
    );
    assert_eq!(code(&["report", "--dir", "nowhere"], p), 1);
}

#[test]
fn shipped_configs_match_defaults() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let study = vqlab_core::harness::StudyConfig::load(&root.join("study.json")).unwrap();
    assert_eq!(study, vqlab_core::harness::StudyConfig::default());
    let spec = vqlab_core::eval::EnsembleSpec::load(&root.join("ensemble.json")).unwrap();
    assert_eq!(spec, vqlab_core::eval::EnsembleSpec::default());
    vqlab_core::harness::StudyConfig::load(&root.join("quick_study.json")).unwrap();
}
