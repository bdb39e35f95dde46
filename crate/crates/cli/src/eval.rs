//! `step eval`: perplexity of a checkpoint on a corpus split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use step_core::checkpoint::{load_checkpoint, Manifest};
use step_core::data::{load_corpus_files, perplexity_limited, Split};
use step_core::model::ToyModel;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub corpus: Vec<PathBuf>,
    pub split: Split,
    /// Defaults to the value recorded in the checkpoint, then 0.1.
    pub validation_fraction: Option<f64>,
    pub seq_len: Option<usize>,
    /// Evaluate every window instead of the recorded limit.
    pub all_windows: bool,
    /// Defaults to `<checkpoint stem>.eval.json` beside the manifest.
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    pub fn new(checkpoint: impl Into<PathBuf>, corpus: Vec<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            corpus,
            split: Split::Validation,
            validation_fraction: None,
            seq_len: None,
            all_windows: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub seq_len: usize,
    pub windows: Option<usize>,
    pub tokens: u64,
    pub loss: f64,
    pub ppl: f64,
    pub corpus_sha256: String,
    /// False when the checkpoint was trained on a different corpus.
    pub corpus_matches: bool,
}

fn meta_usize(m: &Manifest, key: &str) -> Option<usize> {
    m.metadata.get(key).and_then(|v| v.as_u64()).map(|v| v as usize)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput, CliError> {
    if args.corpus.is_empty() {
        return Err(CliError::invalid(anyhow::anyhow!("--corpus is required")));
    }
    let (model, manifest): (ToyModel<f32>, Manifest) = load_checkpoint(&args.checkpoint).map_err(CliError::invalid)?;
    let fraction = args
        .validation_fraction
        .or_else(|| manifest.metadata.get("validation_fraction").and_then(|v| v.as_f64()))
        .unwrap_or(0.1);
    let seq_len = args
        .seq_len
        .or_else(|| meta_usize(&manifest, "seq_len"))
        .unwrap_or(model.config.max_seq_len);
    let windows = if args.all_windows { None } else { meta_usize(&manifest, "eval_windows") };
    let (train, validation) = load_corpus_files(&args.corpus, fraction).map_err(CliError::invalid)?;
    let stream = match args.split {
        Split::Train => &train,
        Split::Validation => &validation,
    };
    let report = perplexity_limited(&model, stream, seq_len, windows).map_err(CliError::invalid)?;
    let recorded = manifest.metadata.get("corpus_sha256").and_then(|v| v.as_str());
    let output = EvalOutput {
        checkpoint: args.checkpoint.clone(),
        split: report.split,
        seq_len,
        windows,
        tokens: report.tokens,
        loss: report.loss,
        ppl: report.ppl,
        corpus_matches: recorded.is_none_or(|d| d == stream.digest),
        corpus_sha256: stream.digest.clone(),
    };
    let out = args.out.clone().unwrap_or_else(|| default_report_path(&args.checkpoint));
    let text = serde_json::to_string_pretty(&output).map_err(CliError::invalid)? + "\n";
    std::fs::write(&out, text).map_err(CliError::invalid)?;
    Ok(output)
}

fn default_report_path(manifest: &Path) -> PathBuf {
    let stem = manifest.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
    manifest.with_file_name(format!("{stem}.eval.json"))
}

pub fn render_eval(e: &EvalOutput) -> String {
    let mut s = format!(
        "{} split: ppl {:.6} (loss {:.6} nats over {} tokens, seq_len {})\n",
        e.split, e.ppl, e.loss, e.tokens, e.seq_len
    );
    if !e.corpus_matches {
        s += "warning: corpus digest differs from the one recorded in the checkpoint\n";
    }
    s
}
