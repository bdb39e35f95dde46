//! The run configuration file (TOML, versioned, unknown fields rejected).

use std::path::{Path, PathBuf};

use anyhow::{ensure, Context};
use serde::{Deserialize, Serialize};
use step_core::model::{ToyModelConfig, BYTE_VOCAB};
use step_core::planner::{flops_vanilla, solve, token_budget_with_first_horizon, SolverMode, StagePlan};
use step_core::trainer::{AdapterSettings, GrowthSettings, RunSpec, StageSchedule, TrainConfig};
use step_core::{layer_params, token_budget};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub head_count: usize,
    #[serde(default = "byte_vocab")]
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
}

fn byte_vocab() -> usize {
    BYTE_VOCAB
}

/// An explicit plan, or planner inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    /// Layers added per stage, e.g. `[4, 4]`.
    pub layers: Option<Vec<usize>>,
    pub target_layers: Option<usize>,
    pub stages: Option<usize>,
    #[serde(default)]
    pub mode: SolverMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    /// Stage lengths split `train.total_steps` by the growth fraction.
    #[default]
    Steps,
    /// FLOPs of vanilla training of the target depth for `train.total_steps`.
    MatchVanilla,
    /// An explicit FLOPs budget.
    Flops,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    #[serde(default)]
    pub kind: BudgetKind,
    pub flops: Option<f64>,
    /// Fixed horizon of the first stage's schedule; stage 1 then runs
    /// `growth_fraction` of it.
    pub first_horizon: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub corpus: Vec<PathBuf>,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
}

fn default_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    pub plan: PlanSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub growth: GrowthSettings,
    /// Absent: frozen layers train without adapters.
    pub adapters: Option<AdapterSettings>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    /// Default run directory, relative to the config file.
    pub run_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        ensure!(
            config.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            config.schema_version
        );
        Ok(config)
    }

    /// Reads `path`, resolving relative corpus and run paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(CliError::invalid)?;
        let mut config = Self::parse(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .map_err(CliError::invalid)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut config.data.corpus {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = &mut config.run_dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn model_config(&self, layers: usize) -> ToyModelConfig {
        ToyModelConfig {
            hidden_dim: self.model.hidden_dim,
            layer_count: layers,
            head_count: self.model.head_count,
            vocab_size: self.model.vocab_size,
            max_seq_len: self.model.max_seq_len,
            tied_embeddings: self.model.tied_embeddings,
        }
    }

    pub fn adapter_rank(&self) -> u64 {
        self.adapters.map_or(0, |a| a.rank as u64)
    }

    pub fn resolve_plan(&self) -> Result<StagePlan, CliError> {
        let p = &self.plan;
        match (&p.layers, p.target_layers, p.stages) {
            (Some(layers), None, None) => StagePlan::new(layers.clone()).map_err(CliError::invalid),
            (None, Some(target), Some(stages)) => {
                let shape = self.model_config(target).shape(self.adapter_rank());
                solve(target, stages, &shape, p.mode).map_err(CliError::infeasible)
            }
            _ => Err(CliError::invalid(anyhow::anyhow!(
                "[plan] needs either `layers` or both `target_layers` and `stages`"
            ))),
        }
    }

    /// Resolves the plan and stage lengths into a [`RunSpec`].
    pub fn run_spec(&self) -> Result<RunSpec, CliError> {
        let plan = self.resolve_plan()?;
        let train = self.train.clone();
        train.validate().map_err(CliError::invalid)?;
        let target = plan.target_layers();
        let model = self.model_config(target);
        model.validate().map_err(CliError::invalid)?;
        let shape = model.shape(self.adapter_rank());
        let f = train.growth_fraction;
        let schedule = match self.budget.kind {
            BudgetKind::Steps if self.budget.first_horizon.is_none() => {
                StageSchedule::from_fraction(plan.stage_count(), train.total_steps, f)
            }
            BudgetKind::Steps => {
                return Err(CliError::invalid(anyhow::anyhow!("budget.first_horizon needs a FLOPs budget kind")))
            }
            kind => {
                let flops = match kind {
                    BudgetKind::MatchVanilla => flops_vanilla(
                        target as u64 * layer_params(model.hidden_dim as u64),
                        train.total_steps as u128 * train.batch_tokens() as u128,
                    ),
                    _ => match self.budget.flops {
                        Some(c) if c.is_finite() && c > 0.0 => c.round() as u128,
                        _ => return Err(CliError::invalid(anyhow::anyhow!("budget.kind = \"flops\" needs a positive budget.flops"))),
                    },
                };
                let budget = match self.budget.first_horizon {
                    Some(h) => token_budget_with_first_horizon(&plan, &shape, flops, f, train.batch_tokens(), h),
                    None => token_budget(&plan, &shape, flops, f, train.batch_tokens()),
                }
                .map_err(CliError::infeasible)?;
                StageSchedule::from_budget(&budget, f, self.budget.first_horizon)
            }
        };
        let spec = RunSpec {
            model,
            plan,
            schedule,
            growth: self.growth,
            adapters: self.adapters,
            train,
        };
        spec.validate().map_err(CliError::invalid)?;
        Ok(spec)
    }

    /// Fails early when a corpus file is missing.
    pub fn check_corpus(&self) -> Result<(), CliError> {
        if self.data.corpus.is_empty() {
            return Err(CliError::invalid(anyhow::anyhow!("[data] corpus lists no files")));
        }
        for p in &self.data.corpus {
            if !p.is_file() {
                return Err(CliError::invalid(anyhow::anyhow!("corpus file {} not found", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
[model]
hidden_dim = 12
head_count = 2
max_seq_len = 16
[plan]
layers = [2, 2]
[adapters]
rank = 2
[train]
total_steps = 40
warmup_steps = 4
seq_len = 16
[data]
corpus = ["corpus.txt"]
"#;

    #[test]
    fn minimal_config_resolves() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let spec = cfg.run_spec().unwrap();
        assert_eq!(spec.plan.increments(), &[2, 2]);
        assert_eq!(spec.schedule.stage_steps, vec![30, 10]);
        assert_eq!(spec.model.vocab_size, 256);
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        let err = RunConfig::parse(&MINIMAL.replace("rank = 2", "rank = 2\nalpha = 3")).unwrap_err();
        assert!(format!("{err:#}").contains("alpha"), "{err:#}");
        assert!(format!("{err:#}").contains("line"), "{err:#}");
        assert!(RunConfig::parse(&MINIMAL.replace("schema_version = 1", "schema_version = 2")).is_err());
    }

    #[test]
    fn budget_kinds() {
        let text = MINIMAL.replace("[adapters]", "[budget]\nkind = \"match_vanilla\"\n[adapters]");
        let spec = RunConfig::parse(&text).unwrap().run_spec().unwrap();
        // stages cost less per token than the 4-layer vanilla model, so they get more steps
        assert!(spec.schedule.total_steps() > 40, "{:?}", spec.schedule);
        let text = MINIMAL.replace("[adapters]", "[budget]\nkind = \"flops\"\n[adapters]");
        assert!(RunConfig::parse(&text).unwrap().run_spec().is_err());
    }

    #[test]
    fn planner_inputs_resolve() {
        let text = MINIMAL.replace("layers = [2, 2]", "target_layers = 8\nstages = 2");
        let plan = RunConfig::parse(&text).unwrap().resolve_plan().unwrap();
        assert_eq!(plan.target_layers(), 8);
        assert_eq!(plan.stage_count(), 2);
    }
}
