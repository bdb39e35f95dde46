//! `step ablate`: small grids over one growth setting with shared seeds.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use step_core::data::{load_corpus_files, TokenStream};
use step_core::growth::{GrowthInit, GrowthPosition};
use step_core::trainer::{derive_seed, run_step_schedule, AdapterSettings, RunSpec, Silent};

use crate::config::{BudgetKind, RunConfig};
use crate::error::CliError;

/// Relative slack of the adapter gate: with adapters may be at most this much
/// worse than without.
pub const PET_GATE_TOLERANCE: f64 = 0.02;
/// Rank used for the "w/ PET" cell when the config has no `[adapters]`.
pub const DEFAULT_ABLATION_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Position,
    Init,
    Timing,
    Pet,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Position => "position",
            Axis::Init => "init",
            Axis::Timing => "timing",
            Axis::Pet => "pet",
        })
    }
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "position" => Ok(Axis::Position),
            "init" => Ok(Axis::Init),
            "timing" => Ok(Axis::Timing),
            "pet" => Ok(Axis::Pet),
            other => Err(format!("unknown axis `{other}` (expected position|init|timing|pet)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateArgs {
    pub axis: Axis,
    pub config: PathBuf,
    /// Seeds shared by every cell; empty means the config's seed.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub stage_steps: Vec<u64>,
    pub peak_simulated_bytes: u128,
    pub total_flops: u128,
    /// Mean validation perplexity over seeds.
    pub ppl: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// The ordering the setting is expected to show, in words.
    pub expected_ordering: String,
    pub ordering_holds: bool,
    /// Only the adapter axis has a pass/fail gate.
    pub gate_passed: Option<bool>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(7).max(7);
        let mut out = format!("ablation: {} (seeds {:?})\n", self.axis, self.seeds);
        out += &format!("{:<width$}  {:>10}  {:>16}  {:>12}  {}\n", "setting", "val ppl", "peak bytes", "FLOPs", "steps");
        for r in &self.rows {
            out += &format!(
                "{:<width$}  {:>10.4}  {:>16}  {:>12.4e}  {:?}\n",
                r.label, r.ppl, r.peak_simulated_bytes, r.total_flops as f64, r.stage_steps
            );
        }
        out += &format!(
            "expected: {} -> {}\n",
            self.expected_ordering,
            if self.ordering_holds { "observed" } else { "not observed" }
        );
        if let Some(g) = self.gate_passed {
            out += &format!(
                "gate (w/ PET ppl <= w/o PET ppl + {:.0}%): {}\n",
                100.0 * PET_GATE_TOLERANCE,
                if g { "PASS" } else { "FAIL" }
            );
        }
        out
    }

    pub fn csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["setting".to_string(), "ppl".into(), "peak_simulated_bytes".into(), "total_flops".into(), "stage_steps".into()];
        header.extend(self.seeds.iter().map(|s| format!("ppl_seed{s}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let steps: Vec<String> = r.stage_steps.iter().map(|s| s.to_string()).collect();
            let mut rec = vec![
                r.label.clone(),
                r.ppl.to_string(),
                r.peak_simulated_bytes.to_string(),
                r.total_flops.to_string(),
                steps.join(";"),
            ];
            rec.extend(r.per_seed.iter().map(|s| s.ppl.to_string()));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// A labelled variant of the base config.
struct Cell {
    label: String,
    config: RunConfig,
}

fn cells(axis: Axis, base: &RunConfig) -> Result<Vec<Cell>, CliError> {
    let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Cell { label: label.to_string(), config }
    };
    Ok(match axis {
        Axis::Position => vec![
            with("Upper", &|c| c.growth.position = GrowthPosition::Upper),
            with("Intermediate", &|c| c.growth.position = GrowthPosition::Intermediate),
            with("Lower", &|c| c.growth.position = GrowthPosition::Lower),
            with("Random", &|c| c.growth.position = GrowthPosition::Random { seed: derive_seed(c.train.seed, 7) }),
        ],
        Axis::Init => {
            let mut v = Vec::new();
            for (name, init) in [("Copy", GrowthInit::Copy), ("Mean", GrowthInit::Mean)] {
                for fpi in [true, false] {
                    let label = format!("{name} {} FPI", if fpi { "w/" } else { "w/o" });
                    v.push(with(&label, &|c| {
                        c.growth.init = init;
                        c.growth.fpi = fpi;
                    }));
                }
            }
            v
        }
        Axis::Timing => {
            // Every cell shares the FLOPs budget and the first stage's
            // schedule horizon; only the growth point moves.
            let mut fixed = base.clone();
            if fixed.budget.kind == BudgetKind::Steps {
                fixed.budget.kind = BudgetKind::MatchVanilla;
            }
            let horizon = match fixed.budget.first_horizon {
                Some(h) => h,
                None => fixed.run_spec()?.schedule.first_horizon,
            };
            fixed.budget.first_horizon = Some(horizon);
            [0.25, 0.5, 0.75, 1.0]
                .into_iter()
                .map(|f| {
                    let mut config = fixed.clone();
                    config.train.growth_fraction = f;
                    Cell { label: format!("{:.0}%", 100.0 * f), config }
                })
                .collect()
        }
        Axis::Pet => {
            let adapters = base.adapters.unwrap_or(AdapterSettings { rank: DEFAULT_ABLATION_RANK, scale: None });
            vec![with("w/ PET", &|c| c.adapters = Some(adapters)), with("w/o PET", &|c| c.adapters = None)]
        }
    })
}

fn run_cell(spec: &RunSpec, seeds: &[u64], train: &TokenStream, validation: &TokenStream, label: &str) -> Result<AblationRow, CliError> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut first = None;
    for &seed in seeds {
        let mut spec = spec.clone();
        spec.train.seed = seed;
        let outcome = run_step_schedule::<f32>(spec, train, validation, &mut Silent)?;
        let ppl = outcome
            .ledger
            .final_eval()
            .map(|e| e.ppl)
            .ok_or_else(|| CliError::invalid(anyhow::anyhow!("cell {label} produced no evaluation")))?;
        per_seed.push(SeedResult { seed, ppl });
        first.get_or_insert(outcome.ledger);
    }
    let ledger = first.unwrap_or_default();
    Ok(AblationRow {
        label: label.to_string(),
        stage_steps: ledger.stages.iter().map(|s| s.steps).collect(),
        peak_simulated_bytes: ledger.peak_simulated_bytes(),
        total_flops: ledger.total_flops(),
        ppl: per_seed.iter().map(|s| s.ppl).sum::<f64>() / per_seed.len().max(1) as f64,
        per_seed,
    })
}

fn best(rows: &[AblationRow]) -> Option<&str> {
    rows.iter().min_by(|a, b| a.ppl.total_cmp(&b.ppl)).map(|r| r.label.as_str())
}

fn judge(axis: Axis, rows: &[AblationRow]) -> (String, bool, Option<bool>) {
    let best = best(rows).unwrap_or("");
    match axis {
        Axis::Position => ("Upper lowest".into(), best == "Upper", None),
        Axis::Init => ("Mean w/o FPI lowest".into(), best == "Mean w/o FPI", None),
        Axis::Timing => ("50% or 75% lowest".into(), best == "50%" || best == "75%", None),
        Axis::Pet => {
            let ppl = |l: &str| rows.iter().find(|r| r.label == l).map_or(f64::NAN, |r| r.ppl);
            let (with, without) = (ppl("w/ PET"), ppl("w/o PET"));
            ("w/ PET <= w/o PET".into(), with <= without, Some(with <= without * (1.0 + PET_GATE_TOLERANCE)))
        }
    }
}

/// Runs every cell of `args.axis` for each seed. Cells run one after another;
/// rows come out in the fixed cell order.
pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationTable, CliError> {
    let base = RunConfig::load(&args.config)?;
    base.check_corpus()?;
    let seeds = if args.seeds.is_empty() { vec![base.train.seed] } else { args.seeds.clone() };
    let grid = cells(args.axis, &base)?;
    let mut specs = grid.iter().map(|c| c.config.run_spec()).collect::<Result<Vec<_>, _>>()?;
    if args.axis == Axis::Pet {
        // Same steps and tokens for both cells, so only the adapters differ.
        specs[1].schedule = specs[0].schedule.clone();
    }
    let (train, validation) =
        load_corpus_files(&base.data.corpus, base.data.validation_fraction).map_err(CliError::invalid)?;

    let mut rows = Vec::with_capacity(grid.len());
    for (cell, spec) in grid.iter().zip(&specs) {
        rows.push(run_cell(spec, &seeds, &train, &validation, &cell.label)?);
    }
    let (expected_ordering, ordering_holds, gate_passed) = judge(args.axis, &rows);
    let table = AblationTable { axis: args.axis, seeds, rows, expected_ordering, ordering_holds, gate_passed };

    if let Some(dir) = &args.out_dir {
        let write = || -> anyhow::Result<()> {
            std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            let stem = format!("ablation_{}", args.axis);
            std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&table)? + "\n")?;
            std::fs::write(dir.join(format!("{stem}.csv")), table.csv()?)?;
            std::fs::write(dir.join(format!("{stem}.txt")), table.render())?;
            Ok(())
        };
        write().map_err(CliError::invalid)?;
    }
    Ok(table)
}
