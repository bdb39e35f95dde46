//! Stage planning: choose how many layers each growth stage adds so that the
//! largest per-stage memory footprint is as small as possible, and split a
//! FLOPs budget into per-stage step counts.
//!
//! The min-max program is tiny (`K <= L`, `L` in the tens), so the exact
//! solver is a dynamic program over (stages used, layers used). Brute-force
//! enumeration of compositions is kept as an independent oracle.

use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{stage_bytes, ModelShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("a plan needs at least one stage")]
    Empty,
    #[error("stage {stage} adds zero layers")]
    ZeroIncrement { stage: usize },
    #[error("cannot split {layers} layers into {stages} non-empty stages")]
    Infeasible { layers: usize, stages: usize },
    #[error("brute force would enumerate {compositions} compositions (limit {limit})")]
    InstanceTooLarge { compositions: u128, limit: u128 },
    #[error("rounding the continuous relaxation gives stage {stage} = {value} layers")]
    RoundingInfeasible { stage: usize, value: i64 },
    #[error("growth fraction {0} must lie strictly between 0 and 1")]
    InvalidGrowthFraction(f64),
    #[error("batch_tokens must be positive")]
    ZeroBatch,
    #[error("FLOPs budget too small: stage {stage} would get no steps")]
    BudgetTooSmall { stage: usize },
}

/// Per-stage layer increments `n_1..n_K` and their running totals `N_i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StagePlan {
    increments: Vec<usize>,
    cumulative: Vec<usize>,
}

impl StagePlan {
    pub fn new(increments: Vec<usize>) -> Result<Self, PlanError> {
        if increments.is_empty() {
            return Err(PlanError::Empty);
        }
        if let Some(i) = increments.iter().position(|&n| n == 0) {
            return Err(PlanError::ZeroIncrement { stage: i + 1 });
        }
        let cumulative = increments
            .iter()
            .scan(0usize, |acc, &n| {
                *acc += n;
                Some(*acc)
            })
            .collect();
        Ok(Self { increments, cumulative })
    }

    /// The single-stage (vanilla) plan.
    pub fn vanilla(layers: usize) -> Result<Self, PlanError> {
        Self::new(vec![layers])
    }

    pub fn increments(&self) -> &[usize] {
        &self.increments
    }

    pub fn cumulative(&self) -> &[usize] {
        &self.cumulative
    }

    pub fn stage_count(&self) -> usize {
        self.increments.len()
    }

    pub fn target_layers(&self) -> usize {
        *self.cumulative.last().expect("non-empty plan")
    }

    /// `N_{i-1}`: layers already trained before 1-based stage `i`.
    pub fn layers_before(&self, stage: usize) -> usize {
        if stage <= 1 {
            0
        } else {
            self.cumulative[stage - 2]
        }
    }

    /// Depth after 1-based stage `i`.
    pub fn layers_after(&self, stage: usize) -> usize {
        self.cumulative[stage - 1]
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.cumulative.iter().map(|n| n.to_string()).collect();
        f.write_str(&parts.join(" → "))
    }
}

impl TryFrom<Vec<usize>> for StagePlan {
    type Error = PlanError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<StagePlan> for Vec<usize> {
    fn from(p: StagePlan) -> Self {
        p.increments
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMode {
    /// Exact min-max optimum.
    #[default]
    Exact,
    /// Round the equal-memory continuous relaxation.
    Paper,
}

impl std::str::FromStr for SolverMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "paper" => Ok(Self::Paper),
            other => Err(format!("unknown solver mode `{other}` (expected exact|paper)")),
        }
    }
}

pub fn solve(layers: usize, stages: usize, shape: &ModelShape, mode: SolverMode) -> Result<StagePlan, PlanError> {
    match mode {
        SolverMode::Exact => solve_exact(layers, stages, shape),
        SolverMode::Paper => solve_paper_rounding(layers, stages, shape),
    }
}

fn check_feasible(layers: usize, stages: usize) -> Result<(), PlanError> {
    if stages == 0 || layers == 0 || stages > layers {
        return Err(PlanError::Infeasible { layers, stages });
    }
    Ok(())
}

fn stage_cost(new_layers: usize, frozen_layers: usize, shape: &ModelShape) -> u128 {
    stage_bytes(new_layers as u64, frozen_layers as u64, shape).total()
}

/// Per-stage totals of a composition.
fn stage_costs(increments: &[usize], shape: &ModelShape) -> Vec<u128> {
    let mut before = 0;
    increments
        .iter()
        .map(|&n| {
            let c = stage_cost(n, before, shape);
            before += n;
            c
        })
        .collect()
}

type TieKey = (u128, Vec<u128>, Reverse<usize>);

/// Ordering key shared by the solver and the oracle: peak first, then the
/// stage totals read from the last stage backwards, then a larger first stage.
fn tie_break_key(increments: &[usize], shape: &ModelShape) -> TieKey {
    let mut costs = stage_costs(increments, shape);
    let peak = costs.iter().copied().max().unwrap_or(0);
    costs.reverse();
    (peak, costs, Reverse(increments[0]))
}

/// Exact minimiser of the per-stage peak memory over all compositions of
/// `layers` into `stages` positive parts.
pub fn solve_exact(layers: usize, stages: usize, shape: &ModelShape) -> Result<StagePlan, PlanError> {
    check_feasible(layers, stages)?;
    let (l, k) = (layers, stages);

    // minmax[s][m]: best achievable peak using s stages for m layers.
    let mut minmax = vec![vec![u128::MAX; l + 1]; k + 1];
    for (m, slot) in minmax[1].iter_mut().enumerate().skip(1) {
        *slot = stage_cost(m, 0, shape);
    }
    for s in 2..=k {
        for m in s..=l {
            let mut best = u128::MAX;
            for n in 1..=(m - (s - 1)) {
                let prev = minmax[s - 1][m - n];
                if prev == u128::MAX {
                    continue;
                }
                best = best.min(prev.max(stage_cost(n, m - n, shape)));
            }
            minmax[s][m] = best;
        }
    }
    let optimum = minmax[k][l];

    // Among plans whose every stage stays within the optimum, pick the one whose
    // stage totals, read from the last stage down, are lexicographically least.
    // That order is decomposable: the key of (s, m) is the cost of stage s
    // followed by the key of the remaining prefix.
    type Entry = Option<(Vec<u128>, usize)>;
    let mut best: Vec<Vec<Entry>> = vec![vec![None; l + 1]; k + 1];
    for (m, slot) in best[1].iter_mut().enumerate().skip(1) {
        let c = stage_cost(m, 0, shape);
        if c <= optimum {
            *slot = Some((vec![c], m));
        }
    }
    for s in 2..=k {
        for m in s..=l {
            let mut chosen: Entry = None;
            for n in 1..=(m - (s - 1)) {
                let c = stage_cost(n, m - n, shape);
                if c > optimum {
                    continue;
                }
                let Some((prefix, _)) = &best[s - 1][m - n] else { continue };
                let mut key = Vec::with_capacity(s);
                key.push(c);
                key.extend_from_slice(prefix);
                if chosen.as_ref().is_none_or(|(cur, _)| key < *cur) {
                    chosen = Some((key, n));
                }
            }
            best[s][m] = chosen;
        }
    }

    let mut increments = vec![0; k];
    let mut m = l;
    for s in (1..=k).rev() {
        let (_, n) = best[s][m].as_ref().expect("optimum is attainable");
        increments[s - 1] = *n;
        m -= n;
    }
    StagePlan::new(increments)
}

/// Number of compositions of `layers` into `stages` positive parts,
/// `C(layers - 1, stages - 1)`.
pub fn composition_count(layers: usize, stages: usize) -> u128 {
    if stages == 0 || stages > layers {
        return 0;
    }
    let (n, r) = ((layers - 1) as u128, (stages - 1) as u128);
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Largest instance [`brute_force_oracle`] accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Enumerates every composition; returns the optimum under the same
/// tie-break as [`solve_exact`] together with its peak bytes.
pub fn brute_force_oracle(layers: usize, stages: usize, shape: &ModelShape) -> Result<(StagePlan, u128), PlanError> {
    check_feasible(layers, stages)?;
    let compositions = composition_count(layers, stages);
    if compositions > BRUTE_FORCE_LIMIT {
        return Err(PlanError::InstanceTooLarge { compositions, limit: BRUTE_FORCE_LIMIT });
    }

    let mut parts = vec![1usize; stages];
    parts[stages - 1] = layers - (stages - 1);
    let mut best: Option<(TieKey, Vec<usize>)> = None;
    loop {
        let key = tie_break_key(&parts, shape);
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, parts.clone()));
        }
        if !next_composition(&mut parts) {
            break;
        }
    }
    let ((peak, _, _), increments) = best.expect("at least one composition");
    Ok((StagePlan::new(increments)?, peak))
}

/// Advances `parts` to the next composition with the same sum and length,
/// odometer style with the last part absorbing the slack. Returns false
/// after the final composition.
fn next_composition(parts: &mut [usize]) -> bool {
    let k = parts.len();
    if k < 2 {
        return false;
    }
    for i in (0..k - 1).rev() {
        let freed: usize = parts[i + 1..k - 1].iter().map(|p| p - 1).sum();
        if parts[k - 1] + freed >= 2 {
            parts[i] += 1;
            for p in &mut parts[i + 1..k - 1] {
                *p = 1;
            }
            parts[k - 1] = parts[k - 1] + freed - 1;
            return true;
        }
    }
    false
}

/// Continuous stage sizes that make every stage use the same memory.
///
/// Equal memory forces a geometric sequence `n_i = n_1 q^{i-1}` with
/// `q = (14P - 16E) / 16P`, and `sum n_i = L` fixes `n_1`.
pub fn continuous_relaxation(layers: usize, stages: usize, shape: &ModelShape) -> Result<Vec<f64>, PlanError> {
    check_feasible(layers, stages)?;
    let p = shape.layer_params() as f64;
    let e = shape.pet_params() as f64;
    let l = layers as f64;
    if stages == 1 {
        return Ok(vec![l]);
    }
    if stages == 2 {
        let n1 = 16.0 * l * p / (30.0 * p - 16.0 * e);
        return Ok(vec![n1, l - n1]);
    }
    let q = (16.0 * p - 2.0 * p - 16.0 * e) / (16.0 * p);
    let n1 = if (1.0 - q).abs() < f64::EPSILON {
        l / stages as f64
    } else {
        l * (1.0 - q) / (1.0 - q.powi(stages as i32))
    };
    Ok((0..stages).map(|i| n1 * q.powi(i as i32)).collect())
}

/// Rounds the continuous relaxation half-up for every stage but the last,
/// which takes whatever keeps the total at `layers`.
pub fn solve_paper_rounding(layers: usize, stages: usize, shape: &ModelShape) -> Result<StagePlan, PlanError> {
    let relaxed = continuous_relaxation(layers, stages, shape)?;
    let mut increments = Vec::with_capacity(stages);
    let mut used: i64 = 0;
    for (i, x) in relaxed.iter().enumerate().take(stages - 1) {
        let n = (x + 0.5).floor() as i64;
        if n < 1 {
            return Err(PlanError::RoundingInfeasible { stage: i + 1, value: n });
        }
        used += n;
        increments.push(n as usize);
    }
    let last = layers as i64 - used;
    if last < 1 {
        return Err(PlanError::RoundingInfeasible { stage: stages, value: last });
    }
    increments.push(last as usize);
    StagePlan::new(increments)
}

/// Training FLOPs of a model with `params` non-embedding parameters on
/// `tokens` tokens: `6NT`.
pub fn flops_vanilla(params: u64, tokens: u128) -> u128 {
    6 * params as u128 * tokens
}

/// Parameters and tokens of one stage for FLOPs accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWork {
    pub trainable_params: u64,
    pub frozen_params: u64,
    pub tokens: u128,
}

/// FLOPs per token of a stage: trainable parameters cost 6, frozen ones 2
/// (forward only).
pub fn flops_per_token(trainable: u64, frozen: u64) -> u128 {
    6 * trainable as u128 + 2 * frozen as u128
}

/// `sum (6 trainable_i + 2 frozen_i) tokens_i`.
pub fn flops_staged(stages: &[StageWork]) -> u128 {
    stages
        .iter()
        .map(|s| flops_per_token(s.trainable_params, s.frozen_params) * s.tokens)
        .sum()
}

/// Non-embedding (trainable, frozen) parameter counts of each stage of a plan.
pub fn plan_stage_params(plan: &StagePlan, shape: &ModelShape) -> Vec<(u64, u64)> {
    let p = shape.layer_params();
    let e = shape.pet_params();
    (1..=plan.stage_count())
        .map(|i| {
            let new = plan.increments()[i - 1] as u64;
            let frozen = plan.layers_before(i) as u64;
            (new * p + frozen * e, frozen * p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub trainable_params: u64,
    pub frozen_params: u64,
    pub tokens: u128,
    pub steps: u64,
    pub flops: u128,
}

/// A FLOPs budget split into per-stage steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsBudget {
    pub total_flops: u128,
    pub batch_tokens: u64,
    pub stages: Vec<StageFlops>,
}

impl FlopsBudget {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn total_tokens(&self) -> u128 {
        self.stages.iter().map(|s| s.tokens).sum()
    }

    pub fn stage_steps(&self) -> Vec<u64> {
        self.stages.iter().map(|s| s.steps).collect()
    }

    /// Global step index at which each growth event fires.
    pub fn growth_steps(&self) -> Vec<u64> {
        self.stages
            .iter()
            .take(self.stages.len().saturating_sub(1))
            .scan(0, |acc, s| {
                *acc += s.steps;
                Some(*acc)
            })
            .collect()
    }
}

/// Splits `flops_budget` over the stages of `plan`.
///
/// Every growth event fires once `growth_fraction` of the steps remaining
/// from that stage onward have run, so stage `i < K` gets
/// `f (1 - f)^{i-1}` of the total and the last stage the rest. The total is
/// chosen so the staged FLOPs meet the budget; the last stage is floored so
/// the result never exceeds it and misses by less than one batch.
pub fn token_budget(
    plan: &StagePlan,
    shape: &ModelShape,
    flops_budget: u128,
    growth_fraction: f64,
    batch_tokens: u64,
) -> Result<FlopsBudget, PlanError> {
    let params = plan_stage_params(plan, shape);
    allocate_steps(&params, flops_budget, growth_fraction, batch_tokens, None)
}

/// Like [`token_budget`] but the first stage runs `growth_fraction` of a
/// fixed `first_horizon` steps; the remaining budget goes to the later stages.
pub fn token_budget_with_first_horizon(
    plan: &StagePlan,
    shape: &ModelShape,
    flops_budget: u128,
    growth_fraction: f64,
    batch_tokens: u64,
    first_horizon: u64,
) -> Result<FlopsBudget, PlanError> {
    let params = plan_stage_params(plan, shape);
    allocate_steps(&params, flops_budget, growth_fraction, batch_tokens, Some(first_horizon))
}

/// Step allocation over explicit per-stage (trainable, frozen) counts.
///
/// A `growth_fraction` of exactly 1.0 is only meaningful with a fixed first
/// horizon (growth after the first stage's schedule has fully run).
pub fn allocate_steps(
    params: &[(u64, u64)],
    flops_budget: u128,
    growth_fraction: f64,
    batch_tokens: u64,
    first_horizon: Option<u64>,
) -> Result<FlopsBudget, PlanError> {
    let f = growth_fraction;
    let valid = if first_horizon.is_some() { f > 0.0 && f <= 1.0 } else { f > 0.0 && f < 1.0 };
    if params.len() > 1 && !valid {
        return Err(PlanError::InvalidGrowthFraction(f));
    }
    if batch_tokens == 0 {
        return Err(PlanError::ZeroBatch);
    }
    let k = params.len();
    let per_step: Vec<u128> = params
        .iter()
        .map(|&(t, fz)| flops_per_token(t, fz) * batch_tokens as u128)
        .collect();

    let mut steps = vec![0u64; k];
    let mut remaining = flops_budget;
    for i in 0..k {
        let s = if i + 1 == k {
            remaining.checked_div(per_step[i]).unwrap_or(0) as u64
        } else if i == 0 && first_horizon.is_some() {
            (f * first_horizon.unwrap() as f64 + 0.5).floor() as u64
        } else {
            // Continuous total for stages i..K under the fraction rule.
            let mut weight = 1.0;
            let mut denom = 0.0;
            for (j, &c) in per_step.iter().enumerate().skip(i) {
                let w = if j + 1 == k { weight } else { weight * f };
                denom += w * c as f64;
                weight *= 1.0 - f;
            }
            let total = remaining as f64 / denom;
            (f * total + 0.5).floor() as u64
        };
        if s == 0 {
            return Err(PlanError::BudgetTooSmall { stage: i + 1 });
        }
        let cost = per_step[i] * s as u128;
        if cost > remaining {
            return Err(PlanError::BudgetTooSmall { stage: i + 2 });
        }
        remaining -= cost;
        steps[i] = s;
    }

    let stages = params
        .iter()
        .zip(&steps)
        .map(|(&(t, fz), &s)| {
            let tokens = s as u128 * batch_tokens as u128;
            StageFlops { trainable_params: t, frozen_params: fz, tokens, steps: s, flops: flops_per_token(t, fz) * tokens }
        })
        .collect::<Vec<_>>();
    let total_flops = stages.iter().map(|s| s.flops).sum();
    Ok(FlopsBudget { total_flops, batch_tokens, stages })
}
