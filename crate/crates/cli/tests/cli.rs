use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dwvit::bypass::BypassSpec;
use dwvit::data::{synthetic_dataset, write_cifar10_records, DatasetSpec};
use dwvit::model::{ModelConfig, Pooling};
use dwvit::train::{RunConfig, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};

fn dwvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwvit"))
        .args(args)
        .output()
        .expect("spawn dwvit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_run() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 10,
            use_pos_embed: true,
            use_class_token: true,
            pooling: Pooling::ClassToken,
            bypass: BypassSpec::dwconv(vec![3], 1),
            seed: 1,
        },
        train: TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 32,
            ..TrainConfig::desk()
        },
        data: DatasetSpec::synthetic(96, 40, 10, 2),
    }
}

fn write_config(dir: &Path, run: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, run.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn analyze_preset_text_lists_counts() {
    let o = dwvit(&["analyze", "--preset", "vit_tiny", "--paper-convention"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let row = |name: &str| {
        text.lines()
            .find(|l| l.trim_start().starts_with(name))
            .unwrap_or_default()
            .to_string()
    };
    assert!(row("dw_params ").contains(" 23040 "), "{text}");
    assert!(row("dw_flops ").contains(" 4064256 "), "{text}");
    assert!(text.contains("branch BatchNorm excluded"));
}

#[test]
fn analyze_csv_matches_closed_form() {
    let o = dwvit(&[
        "analyze",
        "--preset",
        "vit_tiny",
        "--paper-convention",
        "--format",
        "csv",
    ]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.starts_with("quantity,value\n"));
    // 192 channels · 12 layers · 3² taps + 192 biases · 12 layers = 23,040.
    assert!(csv.contains("\ndw_params,23040\n"), "{csv}");
    // 192 · 196 tokens · 12 layers · 9 taps.
    assert!(csv.contains("\ndw_flops,4064256\n"), "{csv}");
}

#[test]
fn analyze_without_paper_convention_counts_batchnorm() {
    let o = dwvit(&["analyze", "--preset", "vit_tiny", "--format", "csv"]);
    // Two BatchNorm parameters per channel per layer on top of the conv counts.
    assert!(stdout(&o).contains("\ndw_params,27648\n"), "{}", stdout(&o));
}

#[test]
fn analyze_accepts_run_and_bare_model_configs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/vit_tiny.toml");
    let o = dwvit(&["analyze", "--config", root.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dw_flops,4064256"));

    let dir = tempfile::tempdir().unwrap();
    let bare = dir.path().join("model.toml");
    let mut table = toml::Table::try_from(ModelConfig::desk()).unwrap();
    table.remove("bypass");
    fs::write(&bare, toml::to_string(&table).unwrap()).unwrap();
    let o = dwvit(&["analyze", "--config", bare.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dw_params,0\n"), "{}", stdout(&o));
}

#[test]
fn analyze_rejects_unknown_preset_and_missing_source() {
    let o = dwvit(&["analyze", "--preset", "vit_huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    assert!(!dwvit(&["analyze"]).status.success());
}

#[test]
fn gradcheck_ops_passes() {
    let o = dwvit(&["gradcheck", "--scope", "ops"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).trim_end().ends_with(", 0 failed"));
}

#[test]
fn train_then_eval_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_run());
    let out = dir.path().join("out");
    let o = dwvit(&["train", "--config", &config, "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best val_top1"));

    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(out.join("config.toml").exists());
    let written = RunConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(written, tiny_run());

    let ckpt = out.join(CHECKPOINT_FILE);
    let o = dwvit(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--synthetic",
        "50",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("top1 ") && line.contains("on 50 samples"), "{line}");
    let top1: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&top1));
}

#[test]
fn eval_reads_cifar_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    fs::create_dir(&data).unwrap();
    write_cifar10_records(&data.join("test_batch.bin"), &synthetic_dataset(30, 10, 4)).unwrap();
    let config = write_config(dir.path(), &tiny_run());
    let out = dir.path().join("out");
    assert!(
        dwvit(&["train", "--config", &config, "--out", out.to_str().unwrap(), "--quiet"])
            .status
            .success()
    );
    let ckpt = out.join(CHECKPOINT_FILE);
    let o = dwvit(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--limit",
        "20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("on 20 samples"), "{}", stdout(&o));
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_run());
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            let o = dwvit(&[
                "train",
                "--config",
                &config,
                "--out",
                out.to_str().unwrap(),
                "--deterministic",
                "--quiet",
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            out
        })
        .collect();
    for f in [METRICS_FILE, CHECKPOINT_FILE] {
        assert_eq!(
            fs::read(runs[0].join(f)).unwrap(),
            fs::read(runs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run();
    run.model.heads = 3;
    let text = toml::to_string(&run).unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let o = dwvit(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("heads"), "{}", stderr(&o));
}

#[test]
fn missing_cifar_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run();
    run.data = DatasetSpec::cifar10(dir.path().join("nowhere"));
    let config = write_config(dir.path(), &run);
    let o = dwvit(&[
        "train",
        "--config",
        &config,
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let o = dwvit(&["eval", "--checkpoint", "/nonexistent/best.ckpt", "--synthetic", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loading /nonexistent/best.ckpt"), "{}", stderr(&o));
}

#[test]
fn readme_config_example_is_a_valid_run_config() {
    let readme = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let block = readme
        .split("```toml\n")
        .nth(1)
        .and_then(|b| b.split("```").next())
        .expect("toml block");
    let run = RunConfig::from_toml(block).unwrap();
    assert_eq!(run.model, ModelConfig::desk());
    assert_eq!(run.train.min_lr(), 5e-6);
    assert_eq!(run.data, DatasetSpec::synthetic(2000, 500, 10, 0));
}
