//! The stage subcommands chained on a handful of small synthetic clips.

use std::path::Path;
use std::process::Command as Process;

use cardio_ssl::models::Checkpoint;
use cardio_ssl::{EncoderVariant, Manifest, TrainConfig};
use cardio_ssl_cli::commands::{execute, Cli};
use cardio_ssl_cli::{CliError, ExperimentConfig};
use clap::Parser;

fn run(args: &[&str]) -> cardio_ssl_cli::Result<String> {
    let mut argv = vec!["cardio-ssl"];
    argv.extend_from_slice(args);
    execute(&Cli::try_parse_from(argv).expect("arguments parse"))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_stage(dir: &Path, name: &str, cfg: &TrainConfig) -> String {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn stages_chain_from_synthetic_data_to_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let out = run(&["synthdata", "--out", path(&data), "--n-clips", "6", "--width", "48", "--height", "40", "--seed", "3"]).unwrap();
    assert!(out.trim_end().ends_with("manifest.tsv"));
    assert_eq!(Manifest::read(&data.join("manifest.tsv")).unwrap().len(), 6);

    let clips = root.join("clips");
    run(&["preprocess", "--manifest", path(&data.join("manifest.tsv")), "--out", path(&clips)]).unwrap();
    let manifest = clips.join("manifest.tsv");
    assert!(clips.join("hashes.tsv").exists());

    let pre = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 1e-3,
        lr_milestones: vec![],
        checkpoint_every: 0,
        encoder: EncoderVariant::Tiny,
        ..TrainConfig::pretrain_default()
    };
    let pre_path = write_stage(root, "pretrain.toml", &pre);
    let ckpt = run(&["pretrain", "--config", &pre_path, "--manifest", path(&manifest), "--out", path(&root.join("pre"))]).unwrap();
    let ckpt = ckpt.trim_end().to_string();
    assert!(Checkpoint::load(Path::new(&ckpt)).is_ok());
    assert!(root.join("pre").join("pretrain.log.jsonl").exists());

    let ft = TrainConfig { epochs: 3, encoder: EncoderVariant::Tiny, ..TrainConfig::finetune_default() };
    let ft_path = write_stage(root, "finetune.toml", &ft);
    let ft_dir = root.join("ft");
    // fine-tuning needs an encoder
    assert!(run(&["finetune", "--config", &ft_path, "--manifest", path(&manifest), "--out", path(&ft_dir)]).is_err());
    let model =
        run(&["finetune", "--config", &ft_path, "--checkpoint", &ckpt, "--manifest", path(&manifest), "--out", path(&ft_dir)]).unwrap();

    let eval_dir = root.join("eval");
    let line = run(&["evaluate", "--model", model.trim_end(), "--manifest", path(&manifest), "--out", path(&eval_dir)]).unwrap();
    assert!(line.starts_with("n 6  MAE "), "{line}");
    for f in ["predictions.json", "metrics.json", "scatter.svg", "scatter.png", "scatter.json"] {
        assert!(eval_dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn supervised_stage_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    run(&["synthdata", "--out", path(&data), "--n-clips", "3", "--width", "40", "--height", "40"]).unwrap();
    let sup = TrainConfig { epochs: 1, batch_size: 2, ..ExperimentConfig::preset("supervised-end-to-end-tiny").unwrap().plan.finetune };
    let cfg = write_stage(root, "sup.toml", &sup);
    // raw manifests are preprocessed on the fly
    let model =
        run(&["finetune", "--config", &cfg, "--manifest", path(&data.join("manifest.tsv")), "--out", path(&root.join("sup"))]).unwrap();
    assert!(Checkpoint::load(Path::new(model.trim_end())).is_ok());
    assert!(root.join("sup").join("supervised.log.jsonl").exists());
}

#[test]
fn a_directory_from_another_experiment_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("exp");
    std::fs::create_dir_all(&dir).unwrap();
    let other = ExperimentConfig::preset("ssl-4-tiny").unwrap();
    std::fs::write(dir.join("experiment.toml"), other.to_toml().unwrap()).unwrap();
    let err = run(&["run", "--preset", "ssl-8-tiny", "--out", path(&dir)]).unwrap_err();
    assert!(matches!(err, CliError::Conflict { .. }), "{err}");
}

#[test]
fn the_binary_reports_errors_with_a_failing_status() {
    let bin = env!("CARGO_BIN_EXE_cardio-ssl");
    let help = Process::new(bin).arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["synthdata", "preprocess", "pretrain", "finetune", "evaluate", "report", "run"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    let bad = Process::new(bin).args(["run", "--preset", "ssl-7"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ssl-7"));
}
