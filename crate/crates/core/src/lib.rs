//! Staged parameter-efficient pre-training: memory-optimal growth planning and
//! a desk-scale executor for the grow / freeze / adapt / continue cycle.
//!
//! The numeric core (tensors, the toy decoder, growth operators and the
//! trainer) is generic over [`Scalar`]; `f32` is used for training and `f64`
//! for finite-difference oracles. Planning and memory accounting work in
//! exact integers.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod growth;
pub mod memory;
pub mod model;
pub mod planner;
pub mod scalar;
pub mod trainer;

pub use memory::{
    gigabytes, layer_params, pet_params, plan_peak_bytes, reduction_percent, stage_state_bytes, vanilla_state_bytes, MemoryEstimate,
    ModelShape, StageBytes,
};
pub use planner::{
    brute_force_oracle, flops_staged, flops_vanilla, solve_exact, solve_paper_rounding, token_budget, FlopsBudget,
    SolverMode, StagePlan, StageWork,
};
pub use scalar::Scalar;

pub use autodiff::{AutodiffError, Graph, Tensor, Var};

/// Single-precision tensor used for training.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by gradient oracles.
pub type Tensor64 = Tensor<f64>;
