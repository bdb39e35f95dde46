//! Staged training: AdamW, warmup/cosine schedule with rewarm at growth
//! events, the grow / freeze / adapt cycle and a per-stage memory ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor};
use crate::data::{make_batches, perplexity_limited, Batch, Batcher, DataError, EvalReport, TokenStream};
use crate::growth::{
    attach_to_frozen, freeze_layers, grow_for_stage, merge_adapters, reset_adapters, AdapterSpec, GrowthError,
    GrowthInit, GrowthPosition, GrowthSpec,
};
use crate::memory::{stage_state_bytes, ModelShape, FROZEN_BYTES_PER_PARAM, TRAINABLE_BYTES_PER_PARAM};
use crate::model::{build_model, ModelError, ParamCounts, ToyModel, ToyModelConfig};
use crate::planner::{flops_per_token, FlopsBudget, StagePlan, StageWork};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (stage {stage}): {reason}")]
    Diverged { step: u64, stage: usize, reason: String, ledger: Box<StageLedger> },
    #[error("training data exhausted after {epochs} epoch(s) at step {step}")]
    DataExhausted { step: u64, epochs: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Observer(String),
}

fn defaults() -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 100,
        restart_warmup_steps: 50,
        beta1: 0.9,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.1,
        grad_clip: 1.0,
        min_lr_ratio: 0.1,
        batch_size: 8,
        seq_len: 64,
        total_steps: 2000,
        growth_fraction: 0.75,
        adapter_reset_interval: 0,
        seed: 0,
        max_epochs: 1,
        eval_windows: None,
        log_interval: 10,
    }
}

/// Optimiser, schedule and batching hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub restart_warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Cosine floor as a fraction of `peak_lr`.
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Step horizon used when stage lengths come from the growth fraction.
    pub total_steps: u64,
    pub growth_fraction: f64,
    /// Steps between adapter resets within a stage; 0 never resets.
    pub adapter_reset_interval: u64,
    pub seed: u64,
    /// Passes over the training split before the data counts as exhausted.
    pub max_epochs: u64,
    /// Cap on validation windows per evaluation; all when absent.
    pub eval_windows: Option<usize>,
    /// Steps between loss-curve and log records.
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        defaults()
    }
}

impl TrainConfig {
    pub fn batch_tokens(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr {} must be positive", self.peak_lr));
        }
        // 1.0 is only usable with a fixed first-stage horizon; stage checks catch the rest
        if !(self.growth_fraction > 0.0 && self.growth_fraction <= 1.0) {
            return fail(format!("growth_fraction {} must lie in (0, 1]", self.growth_fraction));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return fail(format!("warmup_steps {} must be below total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail(format!("min_lr_ratio {} must lie in [0, 1]", self.min_lr_ratio));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.log_interval == 0 || self.max_epochs == 0 {
            return fail("batch_size, seq_len, log_interval and max_epochs must be positive".into());
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        Ok(())
    }
}

/// Moments of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// `grad_scale` multiplies the gradient first (clipping).
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
    decay: bool,
    grad_scale: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let wd = if decay { hyper.weight_decay } else { 0.0 };
    for i in 0..param.len() {
        let g = grad[i].as_f64() * grad_scale;
        let m = hyper.beta1 * state.m[i].as_f64() + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i].as_f64() + (1.0 - hyper.beta2) * g * g;
        state.m[i] = T::from_f64_lossy(m);
        state.v[i] = T::from_f64_lossy(v);
        let p = param[i].as_f64();
        let update = (m / c1) / ((v / c2).sqrt() + hyper.eps) + wd * p;
        param[i] = T::from_f64_lossy(p - lr * update);
    }
}

/// AdamW state keyed by parameter name. State exists only for parameters
/// that have been updated since they last became trainable.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub hyper: AdamHyper,
    states: BTreeMap<String, AdamState<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hyper: AdamHyper) -> Self {
        Self { hyper, states: BTreeMap::new() }
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, grad_scale: f64) {
        let decay = param.shape().len() >= 2;
        let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState::new(param.len()));
        adamw_step(param.data_mut(), grad.data(), state, lr, &self.hyper, decay, grad_scale);
    }

    pub fn state(&self, name: &str) -> Option<&AdamState<T>> {
        self.states.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.states.keys().map(String::as_str)
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.states.retain(|k, _| keep(k));
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Linear warmup then cosine decay to `min_lr_ratio * peak`. Each growth
/// event rewarms linearly from zero back to the peak over
/// `restart_warmup_steps`, followed by a fresh cosine that ends with the run.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub restart_warmup_steps: u64,
    /// Length of the first cosine (from step 0).
    pub first_horizon: u64,
    pub total_steps: u64,
    pub growth_steps: Vec<u64>,
}

fn cosine(peak: f64, min: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

impl LrSchedule {
    pub fn new(config: &TrainConfig, schedule: &StageSchedule) -> Self {
        Self {
            peak_lr: config.peak_lr,
            min_lr: config.peak_lr * config.min_lr_ratio,
            warmup_steps: config.warmup_steps,
            restart_warmup_steps: config.restart_warmup_steps,
            first_horizon: schedule.first_horizon,
            total_steps: schedule.total_steps(),
            growth_steps: schedule.growth_steps(),
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        match self.growth_steps.iter().rev().find(|&&g| g <= step) {
            None => {
                if step < self.warmup_steps {
                    return self.peak_lr * step as f64 / self.warmup_steps as f64;
                }
                let span = self.first_horizon.saturating_sub(self.warmup_steps).max(1);
                cosine(self.peak_lr, self.min_lr, (step - self.warmup_steps) as f64 / span as f64)
            }
            Some(&g) => {
                let j = step - g;
                if j < self.restart_warmup_steps {
                    return self.peak_lr * j as f64 / self.restart_warmup_steps as f64;
                }
                let start = g + self.restart_warmup_steps;
                let span = self.total_steps.saturating_sub(start).max(1);
                cosine(self.peak_lr, self.min_lr, (step - start) as f64 / span as f64)
            }
        }
    }
}

/// Learning rate at `step` given the growth events of the run.
pub fn lr_at(step: u64, growth_steps: &[u64], first_horizon: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    LrSchedule {
        peak_lr: config.peak_lr,
        min_lr: config.peak_lr * config.min_lr_ratio,
        warmup_steps: config.warmup_steps,
        restart_warmup_steps: config.restart_warmup_steps,
        first_horizon,
        total_steps,
        growth_steps: growth_steps.to_vec(),
    }
    .at(step)
}

/// Steps per stage plus the horizon of the first cosine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage_steps: Vec<u64>,
    pub first_horizon: u64,
}

impl StageSchedule {
    /// Growth after `fraction` of the steps remaining at each stage.
    pub fn from_fraction(stages: usize, total_steps: u64, fraction: f64) -> Self {
        let mut stage_steps = Vec::with_capacity(stages);
        let mut remaining = total_steps;
        for i in 0..stages {
            let s = if i + 1 == stages { remaining } else { (fraction * remaining as f64).round() as u64 };
            stage_steps.push(s);
            remaining -= s;
        }
        Self { stage_steps, first_horizon: total_steps }
    }

    /// Stage lengths from a FLOPs allocation. Without an explicit horizon the
    /// first cosine spans `steps_1 / fraction`, the whole run for the default
    /// allocation.
    pub fn from_budget(budget: &FlopsBudget, fraction: f64, first_horizon: Option<u64>) -> Self {
        let stage_steps = budget.stage_steps();
        let first_horizon = match first_horizon {
            Some(h) => h,
            None if stage_steps.len() > 1 => (stage_steps[0] as f64 / fraction).round() as u64,
            None => stage_steps[0],
        };
        Self { stage_steps, first_horizon }
    }

    pub fn total_steps(&self) -> u64 {
        self.stage_steps.iter().sum()
    }

    pub fn growth_steps(&self) -> Vec<u64> {
        let mut acc = 0;
        self.stage_steps[..self.stage_steps.len().saturating_sub(1)]
            .iter()
            .map(|s| {
                acc += s;
                acc
            })
            .collect()
    }
}

/// Placement and initialisation of new layers at each growth event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSettings {
    #[serde(default)]
    pub position: GrowthPosition,
    #[serde(default)]
    pub init: GrowthInit,
    #[serde(default)]
    pub fpi: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSettings {
    pub rank: usize,
    #[serde(default)]
    pub scale: Option<f64>,
}

/// Everything a staged run needs besides data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Architecture; `layer_count` is replaced by each stage's depth.
    pub model: ToyModelConfig,
    pub plan: StagePlan,
    pub schedule: StageSchedule,
    pub growth: GrowthSettings,
    /// `None` trains without adapters on frozen layers.
    pub adapters: Option<AdapterSettings>,
    pub train: TrainConfig,
}

impl RunSpec {
    pub fn adapter_rank(&self) -> usize {
        self.adapters.map_or(0, |a| a.rank)
    }

    /// Memory-model shape matching the toy architecture and adapter rank.
    pub fn shape(&self) -> ModelShape {
        let mut cfg = self.model;
        cfg.layer_count = self.plan.target_layers();
        cfg.shape(self.adapter_rank() as u64)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.train.validate()?;
        self.model.validate()?;
        if self.schedule.stage_steps.len() != self.plan.stage_count() {
            return Err(TrainError::InvalidConfig(format!(
                "{} stage lengths for a {}-stage plan",
                self.schedule.stage_steps.len(),
                self.plan.stage_count()
            )));
        }
        if self.schedule.stage_steps.contains(&0) {
            return Err(TrainError::InvalidConfig("every stage needs at least one step".into()));
        }
        if self.train.warmup_steps >= self.schedule.first_horizon.max(1) {
            return Err(TrainError::InvalidConfig(format!(
                "warmup_steps {} must be below the first horizon {}",
                self.train.warmup_steps, self.schedule.first_horizon
            )));
        }
        if self.adapters.is_some_and(|a| a.rank == 0) {
            return Err(TrainError::InvalidConfig("adapter rank must be positive".into()));
        }
        if self.model.max_seq_len < self.train.seq_len {
            return Err(TrainError::InvalidConfig(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

/// Accounting and outcome of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub layers: usize,
    pub counts: ParamCounts,
    /// Embedding, trainable layer and adapter parameters.
    pub trainable_params: u64,
    pub frozen_params: u64,
    /// `16 * trainable + 2 * frozen`.
    pub simulated_bytes: u128,
    pub steps: u64,
    pub skipped_steps: u64,
    pub tokens: u128,
    /// `(6 * non-embedding trainable + 2 * frozen) * tokens`.
    pub flops: u128,
    pub adapter_resets: u64,
    pub loss_curve: Vec<LossPoint>,
    pub eval: Option<EvalReport>,
}

impl StageRecord {
    pub fn work(&self) -> StageWork {
        StageWork {
            trainable_params: self.counts.trainable_non_embedding(),
            frozen_params: self.frozen_params,
            tokens: self.tokens,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLedger {
    pub stages: Vec<StageRecord>,
}

impl StageLedger {
    pub fn peak_simulated_bytes(&self) -> u128 {
        self.stages.iter().map(|s| s.simulated_bytes).max().unwrap_or(0)
    }

    pub fn total_flops(&self) -> u128 {
        self.stages.iter().map(|s| s.flops).sum()
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn work(&self) -> Vec<StageWork> {
        self.stages.iter().map(StageRecord::work).collect()
    }

    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.stages.last().and_then(|s| s.eval.as_ref())
    }
}

pub fn simulated_bytes(counts: &ParamCounts) -> u128 {
    TRAINABLE_BYTES_PER_PARAM * counts.trainable() as u128 + FROZEN_BYTES_PER_PARAM * counts.frozen_layer as u128
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
    pub trainable_params: u64,
    pub frozen_params: u64,
    pub simulated_bytes: u128,
    pub tokens_seen: u128,
    pub flops_cum: u128,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
}

/// Receives log records and stage boundaries as a run progresses.
pub trait RunObserver<T: Scalar> {
    fn record(&mut self, _record: &LogRecord) -> Result<(), TrainError> {
        Ok(())
    }

    fn stage_end(&mut self, _stage: usize, _model: &ToyModel<T>, _record: &StageRecord) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl<T: Scalar> RunObserver<T> for Silent {}

/// Collects every log record in memory.
#[derive(Debug, Default)]
pub struct Collect {
    pub records: Vec<LogRecord>,
}

impl<T: Scalar> RunObserver<T> for Collect {
    fn record(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const DATA_SEED_TAG: u64 = 1;
const ADAPTER_SEED_TAG: u64 = 1 << 32;

fn is_adapter(name: &str) -> bool {
    name.contains(".adapter_")
}

fn is_embedding_class(name: &str) -> bool {
    !name.starts_with("layers.")
}

/// State of a staged run between steps.
pub struct Trainer<'a, T: Scalar> {
    pub spec: RunSpec,
    pub model: ToyModel<T>,
    pub optimizer: AdamW<T>,
    pub schedule: LrSchedule,
    pub ledger: StageLedger,
    batcher: Batcher<'a>,
    validation: &'a TokenStream,
    step: u64,
    tokens_seen: u128,
    flops_cum: u128,
    current_stage: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Builds the first-stage model. Call [`Trainer::run_stage`] for stage 1,
    /// then [`Trainer::advance`] and `run_stage` for each later one.
    pub fn new(spec: RunSpec, train: &'a TokenStream, validation: &'a TokenStream) -> Result<Self, TrainError> {
        spec.validate()?;
        let mut cfg = spec.model;
        cfg.layer_count = spec.plan.increments()[0];
        let model = build_model(cfg, spec.train.seed)?;
        let batcher = make_batches(
            train,
            spec.train.seq_len,
            spec.train.batch_size,
            derive_seed(spec.train.seed, DATA_SEED_TAG),
        )?;
        if batcher.batches_per_epoch() == 0 {
            return Err(DataError::StreamTooShort {
                len: train.len(),
                seq_len: spec.train.seq_len,
                needed: spec.train.seq_len * spec.train.batch_size + 1,
            }
            .into());
        }
        Ok(Self {
            optimizer: AdamW::new(AdamHyper::from(&spec.train)),
            schedule: LrSchedule::new(&spec.train, &spec.schedule),
            ledger: StageLedger::default(),
            model,
            batcher,
            validation,
            step: 0,
            tokens_seen: 0,
            flops_cum: 0,
            current_stage: 1,
            spec,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn current_stage(&self) -> usize {
        self.current_stage
    }

    fn adapter_spec(&self, settings: AdapterSettings, resets: u64) -> AdapterSpec {
        let tag = ADAPTER_SEED_TAG + (self.current_stage as u64) * 1_000_003 + resets;
        AdapterSpec { rank: settings.rank, scale: settings.scale, seed: derive_seed(self.spec.train.seed, tag) }
    }

    /// Grow into the next stage: merge adapters, add the planned layers, freeze
    /// the old ones, drop their optimiser state and attach fresh adapters.
    pub fn advance(&mut self, observer: &mut dyn RunObserver<T>) -> Result<(), TrainError> {
        let stage = self.current_stage + 1;
        if stage > self.spec.plan.stage_count() {
            return Err(TrainError::InvalidConfig(format!("plan has no stage {stage}")));
        }
        self.current_stage = stage;
        merge_adapters(&mut self.model);
        let settings = self.spec.growth;
        let spec = GrowthSpec {
            new_layer_count: self.spec.plan.increments()[stage - 1],
            position: settings.position,
            init: settings.init,
            fpi: settings.fpi,
        };
        let new = grow_for_stage(&mut self.model, &self.spec.plan, stage, &spec)?;
        let old: Vec<usize> = (0..self.model.layer_count()).filter(|i| !new.contains(i)).collect();
        freeze_layers(&mut self.model, &old)?;
        self.optimizer.retain(is_embedding_class);
        let attached = match self.spec.adapters {
            Some(a) => {
                let spec = self.adapter_spec(a, 0);
                attach_to_frozen(&mut self.model, &spec)?
            }
            None => Vec::new(),
        };
        let counts = self.model.param_counts();
        observer.record(&LogRecord {
            step: self.step,
            stage,
            lr: self.schedule.at(self.step),
            loss: f64::NAN,
            trainable_params: counts.trainable(),
            frozen_params: counts.frozen_layer,
            simulated_bytes: simulated_bytes(&counts),
            tokens_seen: self.tokens_seen,
            flops_cum: self.flops_cum,
            event: Some(format!(
                "grow: +{} layers at {:?} ({}, fpi={}), {} frozen, adapters on {}",
                new.len(),
                new,
                settings.init,
                settings.fpi,
                old.len(),
                attached.len()
            )),
        })
    }

    fn next_batch(&mut self) -> Result<Batch, TrainError> {
        if let Some(b) = self.batcher.next_batch() {
            return Ok(b);
        }
        if self.batcher.epoch() + 1 >= self.spec.train.max_epochs {
            return Err(TrainError::DataExhausted { step: self.step, epochs: self.batcher.epoch() + 1 });
        }
        self.batcher.next_epoch();
        self.batcher.next_batch().ok_or(TrainError::DataExhausted { step: self.step, epochs: self.batcher.epoch() })
    }

    fn diverged(&self, reason: String) -> TrainError {
        TrainError::Diverged {
            step: self.step,
            stage: self.current_stage,
            reason,
            ledger: Box::new(self.ledger.clone()),
        }
    }

    /// One optimisation step. Returns the batch loss, or `None` when the step
    /// was skipped because the gradients were not finite.
    fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<(f64, bool), TrainError> {
        let mut g = Graph::new();
        let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
        let forward = self
            .model
            .forward_graph(&mut g, &batch.inputs, batch.batch, batch.seq)
            .and_then(|pass| Ok((g.cross_entropy(pass.logits, &targets)?, pass.params)));
        let (loss, params) = match forward {
            Ok(v) => v,
            Err(ModelError::Autodiff(AutodiffError::NonFinite { op })) => {
                return Err(self.diverged(format!("non-finite activation in {op}")))
            }
            Err(e) => return Err(e.into()),
        };
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(self.diverged(format!("loss {loss_value}")));
        }
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = params.iter().map(|&v| g.take_grad(v)).collect();
        let sq: f64 = grads.iter().flatten().flat_map(|t| t.data()).map(|v| v.as_f64() * v.as_f64()).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Ok((loss_value, false));
        }
        let clip = self.spec.train.grad_clip;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let optimizer = &mut self.optimizer;
        for (p, grad) in self.model.params_mut().into_iter().zip(&grads) {
            if let (true, Some(grad)) = (p.class.is_trainable(), grad) {
                optimizer.update(&p.name, p.tensor, grad, lr, scale);
            }
        }
        Ok((loss_value, true))
    }

    /// Trains the current stage for its scheduled steps and appends its ledger
    /// entry.
    pub fn run_stage(&mut self, observer: &mut dyn RunObserver<T>) -> Result<StageRecord, TrainError> {
        let stage = self.current_stage;
        let steps = self.spec.schedule.stage_steps[stage - 1];
        let counts = self.model.param_counts();
        let bytes = simulated_bytes(&counts);
        let per_token = flops_per_token(counts.trainable_non_embedding(), counts.frozen_layer);
        let batch_tokens = self.spec.train.batch_tokens() as u128;
        let mut record = StageRecord {
            stage,
            layers: self.model.layer_count(),
            counts,
            trainable_params: counts.trainable(),
            frozen_params: counts.frozen_layer,
            simulated_bytes: bytes,
            steps: 0,
            skipped_steps: 0,
            tokens: 0,
            flops: 0,
            adapter_resets: 0,
            loss_curve: Vec::new(),
            eval: None,
        };
        let interval = self.spec.train.adapter_reset_interval;
        for local in 0..steps {
            if interval > 0 && local > 0 && local % interval == 0 {
                if let Some(settings) = self.spec.adapters.filter(|_| counts.adapter > 0) {
                    record.adapter_resets += 1;
                    let spec = self.adapter_spec(settings, record.adapter_resets);
                    reset_adapters(&mut self.model, &spec)?;
                    self.optimizer.retain(|n| !is_adapter(n));
                    observer.record(&self.log_record(stage, f64::NAN, &counts, Some("adapter_reset".into())))?;
                }
            }
            let batch = self.next_batch()?;
            let lr = self.schedule.at(self.step);
            let (loss, applied) = self.train_step(&batch, lr)?;
            self.step += 1;
            self.tokens_seen += batch_tokens;
            self.flops_cum += per_token * batch_tokens;
            record.steps += 1;
            record.tokens += batch_tokens;
            record.flops += per_token * batch_tokens;
            let event = (!applied).then(|| {
                record.skipped_steps += 1;
                "skipped_step: non-finite gradient".to_string()
            });
            if self.step.is_multiple_of(self.spec.train.log_interval) || local + 1 == steps || event.is_some() {
                record.loss_curve.push(LossPoint { step: self.step, loss });
                let mut rec = self.log_record(stage, loss, &counts, event);
                rec.lr = lr;
                observer.record(&rec)?;
            }
        }
        record.eval = Some(perplexity_limited(
            &self.model,
            self.validation,
            self.spec.train.seq_len,
            self.spec.train.eval_windows,
        )?);
        self.ledger.stages.push(record.clone());
        observer.stage_end(stage, &self.model, &record)?;
        Ok(record)
    }

    fn log_record(&self, stage: usize, loss: f64, counts: &ParamCounts, event: Option<String>) -> LogRecord {
        LogRecord {
            step: self.step,
            stage,
            lr: self.schedule.at(self.step.min(self.schedule.total_steps.saturating_sub(1))),
            loss,
            trainable_params: counts.trainable(),
            frozen_params: counts.frozen_layer,
            simulated_bytes: simulated_bytes(counts),
            tokens_seen: self.tokens_seen,
            flops_cum: self.flops_cum,
            event,
        }
    }

    /// Ledger bytes of the current structure against the closed-form model.
    pub fn expected_stage_bytes(&self) -> u128 {
        stage_state_bytes(&self.spec.plan, self.current_stage, &self.spec.shape())
            .map(|b| b.total())
            .unwrap_or(0)
    }
}

/// Result of a complete staged run.
pub struct RunOutcome<T> {
    pub model: ToyModel<T>,
    pub ledger: StageLedger,
}

/// Runs every stage of `spec.plan`: vanilla training of the first stage,
/// then grow / freeze / adapt / train for each later one.
pub fn run_step_schedule<T: Scalar>(
    spec: RunSpec,
    train: &TokenStream,
    validation: &TokenStream,
    observer: &mut dyn RunObserver<T>,
) -> Result<RunOutcome<T>, TrainError> {
    let stages = spec.plan.stage_count();
    let mut trainer = Trainer::new(spec, train, validation)?;
    for stage in 1..=stages {
        if stage > 1 {
            trainer.advance(observer)?;
        }
        trainer.run_stage(observer)?;
    }
    Ok(RunOutcome { model: trainer.model, ledger: trainer.ledger })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_hand_recurrence() {
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 };
        let mut p = [1.0f64];
        let mut s = AdamState::new(1);
        let grads = [0.5, -0.25, 1.0];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            adamw_step(&mut p, &[*g], &mut s, 0.1, &hyper, true, 1.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.95f64.powi(t as i32 + 1));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - x).abs() < 1e-15);
        }
        // first step moves by exactly lr against the gradient sign
        let mut q = [0.0f64];
        adamw_step(&mut q, &[3.0], &mut AdamState::new(1), 0.01, &hyper, false, 1.0);
        assert!((q[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_constant_gradient_and_zero_gradient() {
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 };
        let mut p = [0.0f32; 2];
        let mut s = AdamState::new(2);
        for _ in 0..100 {
            adamw_step(&mut p, &[2.0, -1.0], &mut s, 1e-3, &hyper, true, 1.0);
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
        let mut z = [0.7f32, -0.3];
        let before = z;
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            adamw_step(&mut z, &[0.0, 0.0], &mut s, 1e-2, &hyper, true, 1.0);
        }
        assert_eq!(z, before);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 };
        let mut p = [2.0f64];
        adamw_step(&mut p, &[0.0], &mut AdamState::new(1), 0.5, &hyper, true, 1.0);
        assert!((p[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    fn schedule() -> LrSchedule {
        let cfg = TrainConfig { peak_lr: 1.0, warmup_steps: 10, restart_warmup_steps: 5, ..TrainConfig::default() };
        LrSchedule::new(&cfg, &StageSchedule { stage_steps: vec![75, 25], first_horizon: 100 })
    }

    #[test]
    fn lr_warmup_rewarm_and_cosine() {
        let s = schedule();
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(5), 0.5);
        assert_eq!(s.at(10), 1.0);
        for step in 10..74 {
            assert!(s.at(step + 1) < s.at(step));
        }
        assert_eq!(s.at(75), 0.0);
        assert_eq!(s.at(80), 1.0);
        assert!((s.at(100) - 0.1).abs() < 1e-12);
        // the first cosine would reach its floor at the horizon
        let single = LrSchedule { growth_steps: vec![], ..s.clone() };
        assert!((single.at(100) - 0.1).abs() < 1e-12);
        assert_eq!(lr_at(80, &[75], 100, 100, &TrainConfig { peak_lr: 1.0, warmup_steps: 10, restart_warmup_steps: 5, ..TrainConfig::default() }), 1.0);
    }

    #[test]
    fn fraction_schedule() {
        let s = StageSchedule::from_fraction(2, 2000, 0.75);
        assert_eq!(s.stage_steps, vec![1500, 500]);
        assert_eq!(s.growth_steps(), vec![1500]);
        let s = StageSchedule::from_fraction(3, 1000, 0.5);
        assert_eq!(s.stage_steps, vec![500, 250, 250]);
        assert_eq!(StageSchedule::from_fraction(1, 10, 0.5).stage_steps, vec![10]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { growth_fraction: 1.5, ..TrainConfig::default() },
            TrainConfig { warmup_steps: 5000, ..TrainConfig::default() },
            TrainConfig { peak_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
