use std::path::Path;
use std::process::{Command, Output};

use peftlab::data::{SyntheticTaskSpec, Task};
use peftlab::experiment::{ExperimentSpec, TaskSource};
use peftlab::model::ModelConfig;
use peftlab::peft::PeftMethod;
use peftlab::train::TrainConfig;

fn peftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peftlab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_spec(dir: &Path) -> std::path::PathBuf {
    let spec = ExperimentSpec {
        name: "tiny".into(),
        model: ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            vocab_size: 16,
            max_positions: 16,
            ..ModelConfig::default()
        },
        method: PeftMethod::FullFt,
        task: TaskSource::Synthetic {
            generator: SyntheticTaskSpec {
                task: Task::Copy,
                vocab_size: 16,
                min_len: 2,
                max_len: 5,
                seed: 3,
                ..SyntheticTaskSpec::default()
            },
            train_pairs: 40,
            dev_pairs: 8,
            test_pairs: 8,
        },
        train: TrainConfig {
            max_lr: 3e-3,
            warmup_steps: 2,
            total_steps: 10,
            max_tokens_per_batch: 48,
            update_frequency: 1,
            ..TrainConfig::default()
        },
        parent: None,
        subset: None,
        output_dir: dir.join("runs"),
        decode_max_len: None,
        record_wall_clock: false,
    };
    let path = dir.join("spec.json");
    spec.save(&path).unwrap();
    path
}

#[test]
fn budget_prints_paper_scale_counts() {
    let o = peftlab(&["budget", "--paper-scale", "--method", "adapter:5,prefix:13", "--csv"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("method,trainable,total,ratio_pct\n"));
    assert!(out.contains("adapter:5,319608,"));
    assert!(out.contains("prefix:13,319488,"));
}

#[test]
fn budget_equalizes_to_an_anchor() {
    let o = peftlab(&["budget", "--paper-scale", "--equalize-to", "bitfit:lnbias", "--csv"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("bitfit:lnbias,333824,"));
    assert!(out.contains("adapter:5,"));
    assert!(out.contains("prefix:14,"));
}

#[test]
fn malformed_method_is_a_usage_error() {
    let o = peftlab(&["budget", "--method", "adapter:x"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("adapter:<b>") && err.contains("xattn"), "{err}");
}

#[test]
fn missing_spec_fails_cleanly() {
    let o = peftlab(&["train", "--spec", "/nonexistent/spec.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}

#[test]
fn train_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let spec = spec.to_str().unwrap();
    let out = dir.path().join("runs");

    let full = peftlab(&["train", "--spec", spec]);
    assert!(full.status.success(), "{}", String::from_utf8_lossy(&full.stderr));
    let adapter = peftlab(&["train", "--spec", spec, "--method", "adapter:4", "--seed", "5"]);
    assert!(adapter.status.success(), "{}", String::from_utf8_lossy(&adapter.stderr));
    assert!(stdout(&adapter).lines().nth(1).unwrap().starts_with("tiny,"));

    let eval = peftlab(&["evaluate", "--spec", spec]);
    assert!(eval.status.success());
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&eval)).unwrap();
    assert_eq!(metrics["n_sentences"], 8);

    let report = peftlab(&["report", "--out", out.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(out.join("report.txt").is_file());
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = peftlab(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
