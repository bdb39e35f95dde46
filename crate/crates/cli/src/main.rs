use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use step_cli::ablate::{cmd_ablate, AblateArgs, Axis};
use step_cli::eval::{cmd_eval, render_eval, EvalArgs};
use step_cli::plan::{cmd_plan, PlanArgs};
use step_cli::train::{cmd_train, render_summary, TrainArgs};
use step_cli::CliError;
use step_core::data::Split;
use step_core::SolverMode;

#[derive(Debug, Parser)]
#[command(name = "step", version, about = "Staged growth planning and desk-scale staged pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the memory-optimal stage plan and report its breakdown.
    Plan {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        hidden: u64,
        #[arg(long, default_value_t = 0)]
        rank: u64,
        #[arg(long)]
        stages: usize,
        #[arg(long, default_value = "exact")]
        mode: SolverMode,
        /// Charge untied embeddings of this vocabulary size in every stage.
        #[arg(long)]
        vocab: Option<u64>,
        /// Exit with status 3 if even the optimal plan exceeds this.
        #[arg(long)]
        gpu_budget_bytes: Option<u128>,
        #[arg(long, requires = "batch_tokens")]
        flops_budget: Option<f64>,
        #[arg(long, requires = "flops_budget")]
        batch_tokens: Option<u64>,
        #[arg(long, default_value_t = 0.75)]
        growth_fraction: f64,
        /// Directory for plan.json, plan.csv and plan_memory.svg.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run a staged training job described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
    /// Perplexity of a checkpoint on a corpus split.
    Eval {
        /// Checkpoint manifest (`.json`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value = "validation", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        validation_fraction: Option<f64>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        all_windows: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid along one axis.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        other => Err(format!("unknown split `{other}` (expected train|validation)")),
    }
}

fn run(command: Command) -> Result<String, CliError> {
    match command {
        Command::Plan {
            layers,
            hidden,
            rank,
            stages,
            mode,
            vocab,
            gpu_budget_bytes,
            flops_budget,
            batch_tokens,
            growth_fraction,
            out_dir,
            json,
        } => {
            let args = PlanArgs {
                layers,
                hidden_dim: hidden,
                rank,
                stages,
                mode,
                vocab_size: vocab,
                gpu_budget_bytes,
                flops_budget,
                batch_tokens,
                growth_fraction,
                out_dir,
            };
            let report = cmd_plan(&args)?;
            Ok(if json { serde_json::to_string_pretty(&report).map_err(CliError::invalid)? + "\n" } else { report.render() })
        }
        Command::Train { config, run_dir, verbose } => {
            let summary = cmd_train(&TrainArgs { config, run_dir, verbose })?;
            Ok(render_summary(&summary))
        }
        Command::Eval { checkpoint, corpus, split, validation_fraction, seq_len, all_windows, out } => {
            let args = EvalArgs { checkpoint, corpus, split, validation_fraction, seq_len, all_windows, out };
            Ok(render_eval(&cmd_eval(&args)?))
        }
        Command::Ablate { axis, config, seeds, out_dir } => {
            Ok(cmd_ablate(&AblateArgs { axis, config, seeds, out_dir })?.render())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
