//! Closed-form parameter counts and model-state memory for vanilla and staged
//! pre-training.
//!
//! Byte accounting assumes mixed-precision Adam: a trainable parameter holds
//! 2 bytes of weights, 2 of gradient and 12 of optimizer state (fp32 master
//! copy plus two moments), 16 in total. A frozen parameter only keeps its
//! 2-byte weights.
//!
//! Only transformer layers are counted. Embeddings can be folded in through
//! [`ModelShape::with_embedding_params`]; that adds the same constant to every
//! stage, so it never changes which plan minimises the peak.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::StagePlan;

/// Bytes held per trainable parameter (weights + gradient + Adam state).
pub const TRAINABLE_BYTES_PER_PARAM: u128 = 16;
/// Bytes held per frozen parameter (weights only).
pub const FROZEN_BYTES_PER_PARAM: u128 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("stage index {index} out of range for a {stages}-stage plan (stages are 1-based)")]
    StageOutOfRange { index: usize, stages: usize },
}

/// Parameters in one LLaMA-style layer of width `d`: four `d x d` attention
/// matrices, three `(8/3)d x d` FFN matrices and two norm gains.
pub fn layer_params(d: u64) -> u64 {
    12 * d * d + 2 * d
}

/// Low-rank adapter parameters for one layer: two rank-`r` factors on each of
/// the seven matrices, `8rd + 3r(d + 8d/3) = 19rd`.
pub fn pet_params(d: u64, r: u64) -> u64 {
    19 * r * d
}

/// Model-state bytes for vanilla training of `n` layers.
pub fn vanilla_state_bytes(n: u64, d: u64) -> u128 {
    TRAINABLE_BYTES_PER_PARAM * n as u128 * layer_params(d) as u128
}

/// Decimal gigabytes (10^9 bytes), the unit used in reports.
pub fn gigabytes(bytes: u128) -> f64 {
    bytes as f64 / 1e9
}

/// Percentage by which `peak` undercuts `vanilla`.
pub fn reduction_percent(peak: u128, vanilla: u128) -> f64 {
    if vanilla == 0 {
        0.0
    } else {
        100.0 * (1.0 - peak as f64 / vanilla as f64)
    }
}

/// Architecture dimensions that drive every memory and FLOPs formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub hidden_dim: u64,
    pub layer_count: u64,
    pub vocab_size: u64,
    pub adapter_rank: u64,
    pub ffn_dim: u64,
    /// Trainable non-layer parameters charged at 16 bytes in every stage.
    #[serde(default)]
    pub embedding_params: u64,
}

impl ModelShape {
    pub fn new(hidden_dim: u64, layer_count: u64, vocab_size: u64, adapter_rank: u64) -> Result<Self, MemoryError> {
        if hidden_dim == 0 {
            return Err(MemoryError::InvalidShape("hidden_dim must be >= 1".into()));
        }
        if hidden_dim > 1 << 20 {
            return Err(MemoryError::InvalidShape("hidden_dim must be <= 2^20".into()));
        }
        if layer_count == 0 {
            return Err(MemoryError::InvalidShape("layer_count must be >= 1".into()));
        }
        if vocab_size == 0 {
            return Err(MemoryError::InvalidShape("vocab_size must be >= 1".into()));
        }
        // round(8d/3) in integers
        let ffn_dim = (16 * hidden_dim + 3) / 6;
        Ok(Self { hidden_dim, layer_count, vocab_size, adapter_rank, ffn_dim, embedding_params: 0 })
    }

    pub fn with_embedding_params(mut self, params: u64) -> Self {
        self.embedding_params = params;
        self
    }

    /// Untied input and output embeddings plus the final norm gain.
    pub fn with_untied_embeddings(self) -> Self {
        let d = self.hidden_dim;
        self.with_embedding_params(2 * self.vocab_size * d + d)
    }

    pub fn with_adapter_rank(mut self, rank: u64) -> Self {
        self.adapter_rank = rank;
        self
    }

    /// True when `8d/3` is an integer, so a real layer has exactly
    /// [`layer_params`] parameters.
    pub fn ffn_is_exact(&self) -> bool {
        self.hidden_dim.is_multiple_of(3)
    }

    pub fn layer_params(&self) -> u64 {
        layer_params(self.hidden_dim)
    }

    pub fn pet_params(&self) -> u64 {
        pet_params(self.hidden_dim, self.adapter_rank)
    }

    pub fn vanilla_state_bytes(&self) -> u128 {
        vanilla_state_bytes(self.layer_count, self.hidden_dim) + self.embedding_bytes()
    }

    fn embedding_bytes(&self) -> u128 {
        TRAINABLE_BYTES_PER_PARAM * self.embedding_params as u128
    }
}

/// Byte breakdown of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBytes {
    /// Full training state of the layers added in this stage.
    pub new_layer_state: u128,
    /// Weights of the layers trained in earlier stages, now frozen.
    pub frozen_params: u128,
    /// Training state of the adapters on the frozen layers.
    pub adapter_state: u128,
    /// Optional embedding add-on (zero unless configured on the shape).
    pub embedding_state: u128,
}

impl StageBytes {
    pub fn total(&self) -> u128 {
        self.new_layer_state + self.frozen_params + self.adapter_state + self.embedding_state
    }
}

/// Per-stage memory of a plan and its peak.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub stages: Vec<StageBytes>,
    pub peak_bytes: u128,
}

impl MemoryEstimate {
    pub fn per_stage_bytes(&self) -> Vec<u128> {
        self.stages.iter().map(StageBytes::total).collect()
    }

    /// 1-based index of the first stage reaching the peak.
    pub fn peak_stage(&self) -> usize {
        self.stages.iter().position(|s| s.total() == self.peak_bytes).map_or(0, |i| i + 1)
    }
}

/// Memory of a stage that adds `new_layers` on top of `frozen_layers` already
/// trained ones.
pub fn stage_bytes(new_layers: u64, frozen_layers: u64, shape: &ModelShape) -> StageBytes {
    let p = shape.layer_params() as u128;
    let e = shape.pet_params() as u128;
    StageBytes {
        new_layer_state: TRAINABLE_BYTES_PER_PARAM * new_layers as u128 * p,
        frozen_params: FROZEN_BYTES_PER_PARAM * frozen_layers as u128 * p,
        adapter_state: TRAINABLE_BYTES_PER_PARAM * frozen_layers as u128 * e,
        embedding_state: shape.embedding_bytes(),
    }
}

/// Memory of stage `index` (1-based) of `plan`.
pub fn stage_state_bytes(plan: &StagePlan, index: usize, shape: &ModelShape) -> Result<StageBytes, MemoryError> {
    if index == 0 || index > plan.stage_count() {
        return Err(MemoryError::StageOutOfRange { index, stages: plan.stage_count() });
    }
    let new_layers = plan.increments()[index - 1] as u64;
    let frozen_layers = plan.layers_before(index) as u64;
    Ok(stage_bytes(new_layers, frozen_layers, shape))
}

/// Per-stage memory and the peak over all stages.
pub fn plan_peak_bytes(plan: &StagePlan, shape: &ModelShape) -> MemoryEstimate {
    let stages: Vec<StageBytes> = (1..=plan.stage_count())
        .map(|i| stage_state_bytes(plan, i, shape).expect("index in range"))
        .collect();
    let peak_bytes = stages.iter().map(StageBytes::total).max().unwrap_or(0);
    MemoryEstimate { stages, peak_bytes }
}
