//! `step plan`: solve for a stage plan and report its memory breakdown.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use step_core::planner::{solve, solve_exact, token_budget};
use step_core::{gigabytes, plan_peak_bytes, reduction_percent, FlopsBudget, ModelShape, SolverMode, StageBytes, StagePlan};

use crate::error::CliError;
use crate::svg::memory_chart;

/// Inputs of `step plan`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanArgs {
    pub layers: usize,
    pub hidden_dim: u64,
    pub rank: u64,
    pub stages: usize,
    pub mode: SolverMode,
    /// Charge untied embeddings of this vocabulary in every stage.
    pub vocab_size: Option<u64>,
    pub gpu_budget_bytes: Option<u128>,
    pub flops_budget: Option<f64>,
    pub batch_tokens: Option<u64>,
    pub growth_fraction: f64,
    pub out_dir: Option<PathBuf>,
}

impl PlanArgs {
    pub fn new(layers: usize, hidden_dim: u64, rank: u64, stages: usize, mode: SolverMode) -> Self {
        Self {
            layers,
            hidden_dim,
            rank,
            stages,
            mode,
            vocab_size: None,
            gpu_budget_bytes: None,
            flops_budget: None,
            batch_tokens: None,
            growth_fraction: 0.75,
            out_dir: None,
        }
    }

    pub fn shape(&self) -> Result<ModelShape, CliError> {
        let shape = ModelShape::new(self.hidden_dim, self.layers as u64, self.vocab_size.unwrap_or(1), self.rank)
            .map_err(CliError::invalid)?;
        Ok(match self.vocab_size {
            Some(_) => shape.with_untied_embeddings(),
            None => shape,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    pub depth: usize,
    pub new_layers: usize,
    pub frozen_layers: usize,
    pub bytes: StageBytes,
    pub total_bytes: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub budget_bytes: u128,
    /// Peak of the exact optimum, the lowest any plan can reach.
    pub optimum_peak_bytes: u128,
    pub fits: bool,
}

/// Step and token allocation under a FLOPs budget, with the vanilla
/// token count the same budget buys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub growth_fraction: f64,
    pub allocation: FlopsBudget,
    pub vanilla_tokens: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub shape: ModelShape,
    pub mode: SolverMode,
    pub plan: StagePlan,
    pub stages: Vec<StageRow>,
    pub peak_bytes: u128,
    pub peak_stage: usize,
    pub vanilla_bytes: u128,
    pub reduction_percent: f64,
    pub gpu_budget: Option<BudgetCheck>,
    pub flops: Option<FlopsReport>,
}

impl PlanReport {
    pub fn stage_bytes(&self) -> Vec<StageBytes> {
        self.stages.iter().map(|s| s.bytes).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            SolverMode::Exact => "exact",
            SolverMode::Paper => "paper",
        };
        let incs: Vec<String> = self.plan.increments().iter().map(|n| n.to_string()).collect();
        let _ = writeln!(out, "plan ({mode}): {}  [layers per stage: {}]", self.plan, incs.join(", "));
        let _ = writeln!(
            out,
            "shape: {} layers, hidden {}, adapter rank {}, {} layer params, {} adapter params per layer",
            self.shape.layer_count,
            self.shape.hidden_dim,
            self.shape.adapter_rank,
            self.shape.layer_params(),
            self.shape.pet_params()
        );
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:>5} {:>7} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "stage", "depth", "new", "frozen", "new GB", "frozen GB", "adapter GB", "embed GB", "total GB"
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:>5} {:>6} {:>5} {:>7} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                s.stage,
                s.depth,
                s.new_layers,
                s.frozen_layers,
                gigabytes(s.bytes.new_layer_state),
                gigabytes(s.bytes.frozen_params),
                gigabytes(s.bytes.adapter_state),
                gigabytes(s.bytes.embedding_state),
                gigabytes(s.total_bytes)
            );
        }
        let _ = writeln!(
            out,
            "peak {:.2} GB ({} bytes, stage {}); vanilla {:.2} GB ({} bytes); {:.1}% below vanilla",
            gigabytes(self.peak_bytes),
            self.peak_bytes,
            self.peak_stage,
            gigabytes(self.vanilla_bytes),
            self.vanilla_bytes,
            self.reduction_percent
        );
        if let Some(b) = &self.gpu_budget {
            let _ = writeln!(
                out,
                "budget {} bytes: {} (optimum peak {} bytes)",
                b.budget_bytes,
                if b.fits { "fits" } else { "INFEASIBLE" },
                b.optimum_peak_bytes
            );
        }
        if let Some(f) = &self.flops {
            let a = &f.allocation;
            let _ = writeln!(
                out,
                "FLOPs budget {:.3e}, batch {} tokens, growth at {:.0}%:",
                a.total_flops as f64,
                a.batch_tokens,
                100.0 * f.growth_fraction
            );
            for (i, s) in a.stages.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  stage {}: {} steps, {:.3e} tokens, {:.3e} FLOPs",
                    i + 1,
                    s.steps,
                    s.tokens as f64,
                    s.flops as f64
                );
            }
            let _ = writeln!(
                out,
                "  total: {} steps, {:.3e} tokens (vanilla at the same budget: {:.3e} tokens)",
                a.total_steps(),
                a.total_tokens() as f64,
                f.vanilla_tokens as f64
            );
        }
        out
    }

    fn csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "stage",
            "depth",
            "new_layers",
            "frozen_layers",
            "new_layer_state_bytes",
            "frozen_param_bytes",
            "adapter_state_bytes",
            "embedding_state_bytes",
            "total_bytes",
        ])?;
        for s in &self.stages {
            w.write_record([
                s.stage.to_string(),
                s.depth.to_string(),
                s.new_layers.to_string(),
                s.frozen_layers.to_string(),
                s.bytes.new_layer_state.to_string(),
                s.bytes.frozen_params.to_string(),
                s.bytes.adapter_state.to_string(),
                s.bytes.embedding_state.to_string(),
                s.total_bytes.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    /// Writes `plan.json`, `plan.csv` and `plan_memory.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        std::fs::write(dir.join("plan.json"), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join("plan.csv"), self.csv()?)?;
        let title = format!("Per-stage model state, plan {}", self.plan);
        std::fs::write(dir.join("plan_memory.svg"), memory_chart(&title, &self.stage_bytes(), self.vanilla_bytes))?;
        Ok(())
    }
}

/// Builds the report of a given plan.
pub fn report_for(plan: StagePlan, shape: ModelShape, mode: SolverMode) -> PlanReport {
    let estimate = plan_peak_bytes(&plan, &shape);
    let stages = estimate
        .stages
        .iter()
        .enumerate()
        .map(|(i, b)| StageRow {
            stage: i + 1,
            depth: plan.cumulative()[i],
            new_layers: plan.increments()[i],
            frozen_layers: plan.layers_before(i + 1),
            bytes: *b,
            total_bytes: b.total(),
        })
        .collect();
    let vanilla_bytes = shape.vanilla_state_bytes();
    PlanReport {
        shape,
        mode,
        stages,
        peak_bytes: estimate.peak_bytes,
        peak_stage: estimate.peak_stage(),
        vanilla_bytes,
        reduction_percent: reduction_percent(estimate.peak_bytes, vanilla_bytes),
        plan,
        gpu_budget: None,
        flops: None,
    }
}

/// Runs `step plan`. Report files are written even when the byte budget turns
/// out infeasible; the error then carries the infeasible exit status.
pub fn cmd_plan(args: &PlanArgs) -> Result<PlanReport, CliError> {
    let shape = args.shape()?;
    let plan = solve(args.layers, args.stages, &shape, args.mode)?;
    let mut report = report_for(plan, shape, args.mode);

    if let Some(budget_bytes) = args.gpu_budget_bytes {
        let optimum_peak_bytes = match args.mode {
            SolverMode::Exact => report.peak_bytes,
            SolverMode::Paper => plan_peak_bytes(&solve_exact(args.layers, args.stages, &shape)?, &shape).peak_bytes,
        };
        report.gpu_budget = Some(BudgetCheck { budget_bytes, optimum_peak_bytes, fits: optimum_peak_bytes <= budget_bytes });
    }

    match (args.flops_budget, args.batch_tokens) {
        (Some(c), Some(batch)) => {
            if !(c.is_finite() && c > 0.0) {
                return Err(CliError::invalid(anyhow::anyhow!("--flops-budget must be positive")));
            }
            let flops = c.round() as u128;
            let allocation = token_budget(&report.plan, &shape, flops, args.growth_fraction, batch)?;
            let per_token = 6 * args.layers as u128 * shape.layer_params() as u128;
            report.flops = Some(FlopsReport {
                growth_fraction: args.growth_fraction,
                allocation,
                vanilla_tokens: flops / per_token.max(1),
            });
        }
        (None, None) => {}
        _ => return Err(CliError::invalid(anyhow::anyhow!("--flops-budget and --batch-tokens go together"))),
    }

    if let Some(dir) = &args.out_dir {
        report.write(dir).map_err(CliError::invalid)?;
    }
    if let Some(b) = &report.gpu_budget {
        if !b.fits {
            return Err(CliError::infeasible(anyhow::anyhow!(
                "no {}-stage plan fits in {} bytes; the optimum peaks at {} bytes",
                args.stages,
                b.budget_bytes,
                b.optimum_peak_bytes
            )));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ExitKind;

    #[test]
    fn single_stage_is_vanilla() {
        let r = cmd_plan(&PlanArgs::new(24, 1536, 128, 1, SolverMode::Exact)).unwrap();
        assert_eq!(r.plan.to_string(), "24");
        assert_eq!(r.peak_bytes, r.vanilla_bytes);
        assert_eq!(r.reduction_percent, 0.0);
    }

    #[test]
    fn budget_below_optimum_is_infeasible() {
        let mut args = PlanArgs::new(24, 1536, 128, 2, SolverMode::Paper);
        args.gpu_budget_bytes = Some(1_000_000);
        assert_eq!(cmd_plan(&args).unwrap_err().kind, ExitKind::Infeasible);
        args.gpu_budget_bytes = Some(7_000_000_000);
        assert!(cmd_plan(&args).unwrap().gpu_budget.unwrap().fits);
        assert_eq!(cmd_plan(&PlanArgs::new(2, 64, 0, 3, SolverMode::Exact)).unwrap_err().kind, ExitKind::Infeasible);
    }

    #[test]
    fn files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = PlanArgs::new(24, 2048, 128, 3, SolverMode::Exact);
        args.flops_budget = Some(1e20);
        args.batch_tokens = Some(1 << 20);
        let read = |d: &Path| {
            ["plan.json", "plan.csv", "plan_memory.svg"].map(|f| std::fs::read(d.join(f)).unwrap())
        };
        args.out_dir = Some(dir.path().join("a"));
        cmd_plan(&args).unwrap();
        args.out_dir = Some(dir.path().join("b"));
        let r = cmd_plan(&args).unwrap();
        assert_eq!(read(&dir.path().join("a")), read(&dir.path().join("b")));
        let back: PlanReport = serde_json::from_slice(&std::fs::read(dir.path().join("a/plan.json")).unwrap()).unwrap();
        assert_eq!((back.plan.clone(), back.peak_bytes, back.stages.clone()), (r.plan.clone(), r.peak_bytes, r.stages.clone()));
        assert!(r.render().contains("10 → 18 → 24"));
    }
}
