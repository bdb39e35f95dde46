//! `step train`: execute a staged run into a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml          resolved copy of the input config
//! run_spec.json        plan and stage lengths actually executed
//! train_log.ndjson     one log record per line
//! ledger.json          per-stage accounting
//! ledger.csv
//! eval.json            final validation perplexity
//! checkpoints/stage{i}.{json,bin}, checkpoints/final.{json,bin}
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde_json::json;
use step_core::checkpoint::save_checkpoint;
use step_core::data::{load_corpus_files, EvalReport};
use step_core::model::ToyModel;
use step_core::trainer::{run_step_schedule, LogRecord, RunObserver, RunSpec, StageLedger, StageRecord, TrainError};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Overrides `run_dir` from the config.
    pub run_dir: Option<PathBuf>,
    /// Print log records to stderr as they arrive.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub spec: RunSpec,
    pub ledger: StageLedger,
    pub final_checkpoint: PathBuf,
}

/// Checkpoint metadata that lets `step eval` reproduce the ledger's
/// evaluation without the config.
fn checkpoint_metadata(config: &RunConfig, digest: &str, stage: usize) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("stage".to_string(), json!(stage)),
        ("seed".to_string(), json!(config.train.seed)),
        ("seq_len".to_string(), json!(config.train.seq_len)),
        ("eval_windows".to_string(), json!(config.train.eval_windows)),
        ("validation_fraction".to_string(), json!(config.data.validation_fraction)),
        ("corpus_sha256".to_string(), json!(digest)),
    ])
}

struct RunDirObserver<'a> {
    log: BufWriter<File>,
    checkpoints: PathBuf,
    config: &'a RunConfig,
    digest: &'a str,
    verbose: bool,
}

fn observer_err(e: impl std::fmt::Display) -> TrainError {
    TrainError::Observer(e.to_string())
}

impl RunObserver<f32> for RunDirObserver<'_> {
    fn record(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).map_err(observer_err)?;
        writeln!(self.log, "{line}").map_err(observer_err)?;
        if self.verbose {
            match &record.event {
                Some(e) => eprintln!("[stage {} step {}] {e}", record.stage, record.step),
                None => eprintln!(
                    "[stage {} step {}] loss {:.4} lr {:.2e}",
                    record.stage, record.step, record.loss, record.lr
                ),
            }
        }
        Ok(())
    }

    fn stage_end(&mut self, stage: usize, model: &ToyModel<f32>, record: &StageRecord) -> Result<(), TrainError> {
        self.log.flush().map_err(observer_err)?;
        let meta = checkpoint_metadata(self.config, self.digest, stage);
        save_checkpoint(model, &self.checkpoints, &format!("stage{stage}"), meta).map_err(observer_err)?;
        if self.verbose {
            if let Some(e) = &record.eval {
                eprintln!("[stage {stage}] validation ppl {:.4} over {} tokens", e.ppl, e.tokens);
            }
        }
        Ok(())
    }
}

pub fn ledger_csv(ledger: &StageLedger) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "stage",
        "layers",
        "trainable_params",
        "frozen_params",
        "adapter_params",
        "simulated_bytes",
        "steps",
        "skipped_steps",
        "tokens",
        "flops",
        "adapter_resets",
        "final_train_loss",
        "val_loss",
        "val_ppl",
    ])?;
    for s in &ledger.stages {
        let last = s.loss_curve.last().map_or(String::new(), |p| p.loss.to_string());
        let (loss, ppl) = s.eval.as_ref().map_or((String::new(), String::new()), |e| (e.loss.to_string(), e.ppl.to_string()));
        w.write_record([
            s.stage.to_string(),
            s.layers.to_string(),
            s.trainable_params.to_string(),
            s.frozen_params.to_string(),
            s.counts.adapter.to_string(),
            s.simulated_bytes.to_string(),
            s.steps.to_string(),
            s.skipped_steps.to_string(),
            s.tokens.to_string(),
            s.flops.to_string(),
            s.adapter_resets.to_string(),
            last,
            loss,
            ppl,
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn write_ledger(dir: &Path, ledger: &StageLedger) -> anyhow::Result<()> {
    std::fs::write(dir.join("ledger.json"), serde_json::to_string_pretty(ledger)? + "\n")?;
    std::fs::write(dir.join("ledger.csv"), ledger_csv(ledger)?)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// Runs `step train`. Everything that can be validated up front (config,
/// plan, corpus) is checked before the run directory is created.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let config = RunConfig::load(&args.config)?;
    config.check_corpus()?;
    let spec = config.run_spec()?;
    let (train, validation) =
        load_corpus_files(&config.data.corpus, config.data.validation_fraction).map_err(CliError::invalid)?;
    let run_dir = args
        .run_dir
        .clone()
        .or_else(|| config.run_dir.clone())
        .ok_or_else(|| CliError::invalid(anyhow::anyhow!("no run directory given (--run-dir or run_dir in the config)")))?;
    if run_dir.exists() && std::fs::read_dir(&run_dir).map_err(CliError::invalid)?.next().is_some() {
        return Err(CliError::invalid(anyhow::anyhow!("run directory {} is not empty", run_dir.display())));
    }

    let checkpoints = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&checkpoints)
        .with_context(|| format!("cannot create {}", checkpoints.display()))
        .map_err(CliError::invalid)?;
    std::fs::write(run_dir.join("config.toml"), config.to_toml()).map_err(CliError::invalid)?;
    write_json(&run_dir.join("run_spec.json"), &spec).map_err(CliError::invalid)?;

    let log = File::create(run_dir.join("train_log.ndjson")).map_err(CliError::invalid)?;
    let mut observer = RunDirObserver {
        log: BufWriter::new(log),
        checkpoints: checkpoints.clone(),
        config: &config,
        digest: &train.digest,
        verbose: args.verbose,
    };
    let outcome = run_step_schedule::<f32>(spec.clone(), &train, &validation, &mut observer);
    observer.log.flush().map_err(CliError::invalid)?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged { step, stage, reason, ledger }) => {
            write_ledger(&run_dir, &ledger).map_err(CliError::invalid)?;
            return Err(CliError::diverged(anyhow::anyhow!(
                "training diverged at step {step} (stage {stage}): {reason}; partial ledger in {}",
                run_dir.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let stages = spec.plan.stage_count();
    let meta = checkpoint_metadata(&config, &train.digest, stages);
    let paths = save_checkpoint(&outcome.model, &checkpoints, FINAL_CHECKPOINT, meta).map_err(CliError::invalid)?;
    write_ledger(&run_dir, &outcome.ledger).map_err(CliError::invalid)?;
    let eval: Option<&EvalReport> = outcome.ledger.final_eval();
    write_json(&run_dir.join("eval.json"), &eval).map_err(CliError::invalid)?;
    Ok(TrainSummary { run_dir, spec, ledger: outcome.ledger, final_checkpoint: paths.manifest })
}

/// Human-readable summary of a finished run.
pub fn render_summary(summary: &TrainSummary) -> String {
    let mut out = format!("run directory: {}\nplan: {}\n", summary.run_dir.display(), summary.spec.plan);
    for s in &summary.ledger.stages {
        let ppl = s.eval.as_ref().map_or(f64::NAN, |e| e.ppl);
        out += &format!(
            "stage {}: {} layers, {} steps, {} trainable / {} frozen params, {} simulated bytes, val ppl {:.4}\n",
            s.stage, s.layers, s.steps, s.trainable_params, s.frozen_params, s.simulated_bytes, ppl
        );
    }
    out += &format!(
        "peak simulated bytes {}; total FLOPs {:.4e}\n",
        summary.ledger.peak_simulated_bytes(),
        summary.ledger.total_flops() as f64
    );
    out
}
