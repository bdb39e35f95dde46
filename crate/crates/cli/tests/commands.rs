use std::path::{Path, PathBuf};
use std::process::Command;

use step_cli::ablate::{cmd_ablate, AblateArgs, Axis};
use step_cli::eval::{cmd_eval, EvalArgs};
use step_cli::plan::{cmd_plan, PlanArgs};
use step_cli::train::{cmd_train, TrainArgs};
use step_cli::ExitKind;
use step_core::checkpoint::{load_checkpoint, save_checkpoint};
use step_core::model::ToyModel;
use step_core::trainer::StageLedger;
use step_core::{stage_state_bytes, SolverMode};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt").canonicalize().unwrap()
}

/// Writes a seconds-long config into `dir` and returns its path.
fn write_config(dir: &Path, layers: &str, adapters: bool, extra_train: &str) -> PathBuf {
    let adapters = if adapters { "[adapters]\nrank = 4\n" } else { "" };
    let text = format!(
        r#"schema_version = 1

[model]
hidden_dim = 24
head_count = 2
max_seq_len = 32

[plan]
layers = {layers}

{adapters}
[train]
warmup_steps = 4
restart_warmup_steps = 2
batch_size = 4
seq_len = 32
total_steps = 24
eval_windows = 32
log_interval = 4
{extra_train}

[data]
corpus = ["{}"]
"#,
        corpus().display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, run_dir: &Path) -> Result<step_cli::train::TrainSummary, step_cli::CliError> {
    cmd_train(&TrainArgs { config: config.to_path_buf(), run_dir: Some(run_dir.to_path_buf()), verbose: false })
}

#[test]
fn single_stage_run_writes_a_one_stage_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[3]", false, "");
    let run = tmp.path().join("run");
    let summary = train(&cfg, &run).unwrap();
    assert_eq!(summary.ledger.stages.len(), 1);
    assert_eq!(summary.ledger.stages[0].steps, 24);
    assert_eq!(summary.ledger.stages[0].frozen_params, 0);
    for f in ["config.toml", "run_spec.json", "train_log.ndjson", "ledger.json", "ledger.csv", "eval.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("checkpoints/stage1.json").is_file());
    assert!(summary.final_checkpoint.is_file());
}

#[test]
fn staged_ledger_reconciles_with_the_memory_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[2, 2]", true, "");
    let run = tmp.path().join("run");
    let summary = train(&cfg, &run).unwrap();
    let shape = summary.spec.shape();
    assert_eq!(summary.ledger.stages.len(), 2);
    for (i, rec) in summary.ledger.stages.iter().enumerate() {
        assert_eq!(rec.simulated_bytes, stage_state_bytes(&summary.spec.plan, i + 1, &shape).unwrap().total());
    }
    let on_disk: StageLedger = serde_json::from_str(&std::fs::read_to_string(run.join("ledger.json")).unwrap()).unwrap();
    assert_eq!(on_disk, summary.ledger);
    let csv = std::fs::read_to_string(run.join("ledger.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn missing_corpus_fails_before_creating_the_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[2]", false, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(&corpus().display().to_string(), "/nonexistent/corpus.txt");
    std::fs::write(&cfg, text).unwrap();
    let run = tmp.path().join("run");
    let err = train(&cfg, &run).unwrap_err();
    assert_eq!(err.kind, ExitKind::InvalidInput);
    assert!(format!("{err}").contains("not found"), "{err}");
    assert!(!run.exists());
}

#[test]
fn config_errors_name_the_line_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[2]", false, "learning_rat = 0.1");
    let err = train(&cfg, &tmp.path().join("run")).unwrap_err();
    let msg = format!("{err}");
    assert_eq!(err.code(), 2);
    assert!(msg.contains("line") && msg.contains("learning_rat"), "{msg}");
}

#[test]
fn non_empty_run_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[2]", false, "");
    let run = tmp.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("keep"), "x").unwrap();
    assert_eq!(train(&cfg, &run).unwrap_err().kind, ExitKind::InvalidInput);
}

#[test]
fn eval_reproduces_the_ledger_and_detects_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[1, 2]", true, "");
    let run = tmp.path().join("run");
    let summary = train(&cfg, &run).unwrap();
    let recorded = summary.ledger.final_eval().unwrap().ppl;

    let out = cmd_eval(&EvalArgs::new(&summary.final_checkpoint, vec![corpus()])).unwrap();
    assert!(out.corpus_matches);
    assert!((out.ppl - recorded).abs() / recorded < 1e-6, "{} vs {recorded}", out.ppl);
    assert!(run.join("checkpoints/final.eval.json").is_file());

    let blob = summary.final_checkpoint.with_extension("bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&blob, bytes).unwrap();
    let err = cmd_eval(&EvalArgs::new(&summary.final_checkpoint, vec![corpus()])).unwrap_err();
    assert!(format!("{err}").contains("digest"), "{err}");
}

#[test]
fn zeroed_output_projection_evaluates_to_uniform_perplexity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[2]", false, "");
    let summary = train(&cfg, &tmp.path().join("run")).unwrap();
    let (mut model, manifest): (ToyModel<f32>, _) = load_checkpoint(&summary.final_checkpoint).unwrap();
    match model.unembed.as_mut() {
        Some(u) => u.data_mut().fill(0.0),
        None => model.embed.data_mut().fill(0.0),
    }
    let paths = save_checkpoint(&model, tmp.path(), "uniform", manifest.metadata).unwrap();
    let out = cmd_eval(&EvalArgs::new(&paths.manifest, vec![corpus()])).unwrap();
    assert!((out.ppl - 256.0).abs() < 1e-2, "{}", out.ppl);
}

#[test]
fn runaway_learning_rate_exits_as_diverged_with_partial_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[1, 1]", true, "peak_lr = 1e6\ngrad_clip = 0.0");
    let run = tmp.path().join("run");
    let err = train(&cfg, &run).unwrap_err();
    assert_eq!(err.code(), 4, "{err}");
    assert!(run.join("ledger.json").is_file());
}

#[test]
fn position_ablation_reports_every_arm() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[2, 2]", true, "");
    let out = tmp.path().join("ablate");
    let table = cmd_ablate(&AblateArgs { axis: Axis::Position, config: cfg, seeds: vec![0], out_dir: Some(out.clone()) }).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["Upper", "Intermediate", "Lower", "Random"]);
    assert!(table.rows.iter().all(|r| r.ppl.is_finite() && r.per_seed.len() == 1));
    // position does not change the stage accounting
    assert!(table.rows.iter().all(|r| r.total_flops == table.rows[0].total_flops));
    assert_eq!(table.gate_passed, None);
    for ext in ["json", "csv", "txt"] {
        assert!(out.join(format!("ablation_position.{ext}")).is_file());
    }
}

#[test]
fn plan_command_matches_the_memory_model() {
    let report = cmd_plan(&PlanArgs::new(24, 1536, 128, 2, SolverMode::Paper)).unwrap();
    assert_eq!(report.plan.increments(), &[14, 10]);
    assert_eq!(report.peak_bytes, report.stages.iter().map(|s| s.total_bytes).max().unwrap());
    assert!(report.reduction_percent > 40.0 && report.reduction_percent < 43.0, "{}", report.reduction_percent);
}

fn step(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_step")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let ok = step(&["plan", "--layers", "24", "--hidden", "1536", "--rank", "128", "--stages", "2", "--mode", "paper"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("14 → 24"));

    let infeasible = step(&["plan", "--layers", "24", "--hidden", "1536", "--stages", "2", "--gpu-budget-bytes", "1000"]);
    assert_eq!(infeasible.status.code(), Some(3));

    let bad = step(&["plan", "--layers", "0", "--hidden", "16", "--stages", "1"]);
    assert_eq!(bad.status.code(), Some(2));

    let usage = step(&["plan", "--hidden", "16"]);
    assert_eq!(usage.status.code(), Some(2));

    let missing = step(&["train", "--config", "/nonexistent/config.toml"]);
    assert_eq!(missing.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[1, 1]", true, "peak_lr = 1e6\ngrad_clip = 0.0");
    let run = tmp.path().join("run");
    let diverged = step(&["train", "--config", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap()]);
    assert_eq!(diverged.status.code(), Some(4), "{}", String::from_utf8_lossy(&diverged.stderr));
}
