//! Depth growth, layer freezing and low-rank adapters.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{normal_tensor, Adapter, Layer, Matrix, ToyModel};
use crate::planner::StagePlan;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrowthError {
    #[error("growth must add at least one layer")]
    NoNewLayers,
    #[error("model has {current} layers; adding {added} does not reach the planned {expected}")]
    PlanMismatch { current: usize, added: usize, expected: usize },
    #[error("layer {0} carries adapters; merge them before growing")]
    AdaptersAttached(usize),
    #[error("layer {index} out of range for a {layers}-layer model")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("adapters attach only to frozen layers, layer {0} is trainable")]
    NotFrozen(usize),
    #[error("layer {0} already has adapters")]
    AlreadyAttached(usize),
    #[error("adapter rank must be at least 1")]
    ZeroRank,
    #[error("no adapters attached")]
    NoAdapters,
    #[error("unknown {kind} '{value}'")]
    Unknown { kind: &'static str, value: String },
}

/// Where new layers go in the stack. Serialised as `upper`, `intermediate`,
/// `lower` or `random(<seed>)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GrowthPosition {
    /// On top of the existing stack.
    #[default]
    Upper,
    /// Interleaved, one after each evenly spaced existing layer.
    Intermediate,
    /// Below the existing stack.
    Lower,
    /// Uniformly random slots drawn from the seed.
    Random { seed: u64 },
}

impl fmt::Display for GrowthPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrowthPosition::Upper => f.write_str("upper"),
            GrowthPosition::Intermediate => f.write_str("intermediate"),
            GrowthPosition::Lower => f.write_str("lower"),
            GrowthPosition::Random { seed } => write!(f, "random({seed})"),
        }
    }
}

impl FromStr for GrowthPosition {
    type Err = GrowthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upper" => Ok(Self::Upper),
            "intermediate" => Ok(Self::Intermediate),
            "lower" => Ok(Self::Lower),
            "random" => Ok(Self::Random { seed: 0 }),
            _ => s
                .strip_prefix("random(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse().ok())
                .map(|seed| Self::Random { seed })
                .ok_or_else(|| GrowthError::Unknown { kind: "growth position", value: s.into() }),
        }
    }
}

impl Serialize for GrowthPosition {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GrowthPosition {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

/// How a new layer's weights are derived from existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthInit {
    Copy,
    /// Average of the source layer and the existing layer above it.
    #[default]
    Mean,
}

impl fmt::Display for GrowthInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GrowthInit::Copy => "copy",
            GrowthInit::Mean => "mean",
        })
    }
}

impl FromStr for GrowthInit {
    type Err = GrowthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Self::Copy),
            "mean" => Ok(Self::Mean),
            _ => Err(GrowthError::Unknown { kind: "growth init", value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthSpec {
    pub new_layer_count: usize,
    pub position: GrowthPosition,
    pub init: GrowthInit,
    /// Zero the residual output projections of new layers.
    pub fpi: bool,
}

impl GrowthSpec {
    pub fn new(new_layer_count: usize) -> Self {
        Self { new_layer_count, position: GrowthPosition::default(), init: GrowthInit::default(), fpi: false }
    }
}

/// One slot of the grown stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Existing(usize),
    /// New layer initialised from this existing layer.
    New { source: usize },
}

/// Source layer for the `k`-th of `m` new layers drawn from `n` existing
/// ones, taking the `m` layers at the top or bottom when there are enough.
fn spread(k: usize, m: usize, n: usize, from_top: bool) -> usize {
    if m <= n {
        if from_top {
            n - m + k
        } else {
            k
        }
    } else {
        k * n / m
    }
}

/// The grown stack for `spec` on `n` existing layers, bottom to top.
pub fn growth_layout(n: usize, spec: &GrowthSpec) -> Vec<Slot> {
    let m = spec.new_layer_count;
    let existing = (0..n).map(Slot::Existing);
    match spec.position {
        GrowthPosition::Upper => existing.chain((0..m).map(|k| Slot::New { source: spread(k, m, n, true) })).collect(),
        GrowthPosition::Lower => (0..m).map(|k| Slot::New { source: spread(k, m, n, false) }).chain(existing).collect(),
        GrowthPosition::Intermediate => {
            let mut out = Vec::with_capacity(n + m);
            let mut k = 0;
            for i in 0..n {
                out.push(Slot::Existing(i));
                while k < m && k * n / m == i {
                    out.push(Slot::New { source: i });
                    k += 1;
                }
            }
            out
        }
        GrowthPosition::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut is_new = vec![false; n + m];
            for slot in sample(&mut rng, n + m, m) {
                is_new[slot] = true;
            }
            let mut out = Vec::with_capacity(n + m);
            let mut seen = 0usize;
            for new in is_new {
                if new {
                    out.push(Slot::New { source: seen.saturating_sub(1) });
                } else {
                    out.push(Slot::Existing(seen));
                    seen += 1;
                }
            }
            out
        }
    }
}

fn mean_layer<T: Scalar>(a: &Layer<T>, b: &Layer<T>) -> Layer<T> {
    let half = T::from_f64_lossy(0.5);
    let avg = |x: &Tensor<T>, y: &Tensor<T>| Tensor::from_fn(x.shape(), |i| (x.data()[i] + y.data()[i]) * half);
    Layer {
        weights: std::array::from_fn(|i| avg(&a.weights[i], &b.weights[i])),
        attn_gain: avg(&a.attn_gain, &b.attn_gain),
        ffn_gain: avg(&a.ffn_gain, &b.ffn_gain),
        frozen: false,
        adapters: None,
    }
}

/// Adds `spec.new_layer_count` layers. Returns the indices of the new layers
/// in the grown stack. Every existing layer keeps its frozen flag.
pub fn grow<T: Scalar>(model: &mut ToyModel<T>, spec: &GrowthSpec) -> Result<Vec<usize>, GrowthError> {
    if spec.new_layer_count == 0 {
        return Err(GrowthError::NoNewLayers);
    }
    if let Some(i) = model.layers.iter().position(|l| l.adapters.is_some()) {
        return Err(GrowthError::AdaptersAttached(i));
    }
    let old = std::mem::take(&mut model.layers);
    let n = old.len();
    let layout = growth_layout(n, spec);
    let mut new_indices = Vec::with_capacity(spec.new_layer_count);
    let mut layers = Vec::with_capacity(layout.len());
    for (pos, slot) in layout.iter().enumerate() {
        match *slot {
            Slot::Existing(i) => layers.push(old[i].clone()),
            Slot::New { source } => {
                let mut layer = match spec.init {
                    GrowthInit::Mean if source + 1 < n => mean_layer(&old[source], &old[source + 1]),
                    _ => Layer { frozen: false, adapters: None, ..old[source].clone() },
                };
                if spec.fpi {
                    layer.weight_mut(Matrix::Output).data_mut().fill(T::zero());
                    layer.weight_mut(Matrix::Down).data_mut().fill(T::zero());
                }
                layers.push(layer);
                new_indices.push(pos);
            }
        }
    }
    model.layers = layers;
    model.config.layer_count = model.layers.len();
    Ok(new_indices)
}

/// [`grow`] after checking the result has the depth `plan` prescribes once
/// `stage` (1-based, at least 2) is reached.
pub fn grow_for_stage<T: Scalar>(
    model: &mut ToyModel<T>,
    plan: &StagePlan,
    stage: usize,
    spec: &GrowthSpec,
) -> Result<Vec<usize>, GrowthError> {
    let expected = plan.layers_after(stage);
    let current = model.layer_count();
    if current + spec.new_layer_count != expected || plan.layers_before(stage) != current {
        return Err(GrowthError::PlanMismatch { current, added: spec.new_layer_count, expected });
    }
    grow(model, spec)
}

pub fn freeze_layers<T: Scalar>(model: &mut ToyModel<T>, indices: &[usize]) -> Result<(), GrowthError> {
    let layers = model.layer_count();
    if let Some(&index) = indices.iter().find(|&&i| i >= layers) {
        return Err(GrowthError::LayerOutOfRange { index, layers });
    }
    for &i in indices {
        model.layers[i].frozen = true;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    /// Multiplier on `A B`; `None` means `1 / rank`.
    pub scale: Option<f64>,
    pub seed: u64,
}

impl AdapterSpec {
    pub fn new(rank: usize, seed: u64) -> Self {
        Self { rank, scale: None, seed }
    }

    pub fn effective_scale(&self) -> f64 {
        self.scale.unwrap_or(1.0 / self.rank.max(1) as f64)
    }
}

/// Attaches fresh adapters to every listed (frozen) layer: `A` zero and `B`
/// normal with standard deviation `1/sqrt(in)`.
pub fn attach_adapters<T: Scalar>(model: &mut ToyModel<T>, layers: &[usize], spec: &AdapterSpec) -> Result<(), GrowthError> {
    if spec.rank == 0 {
        return Err(GrowthError::ZeroRank);
    }
    let count = model.layer_count();
    for &i in layers {
        let layer = model.layers.get(i).ok_or(GrowthError::LayerOutOfRange { index: i, layers: count })?;
        if !layer.frozen {
            return Err(GrowthError::NotFrozen(i));
        }
        if layer.adapters.is_some() {
            return Err(GrowthError::AlreadyAttached(i));
        }
    }
    let (d, f) = (model.config.hidden_dim, model.config.ffn_dim());
    let scale = T::from_f64_lossy(spec.effective_scale());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for &i in layers {
        let adapters = Matrix::ALL.map(|m| {
            let (out, inp) = m.shape(d, f);
            Adapter {
                a: Tensor::zeros(&[out, spec.rank]),
                b: normal_tensor(&mut rng, &[spec.rank, inp], 1.0 / (inp as f64).sqrt()),
                scale,
            }
        });
        model.layers[i].adapters = Some(Box::new(adapters));
    }
    Ok(())
}

/// Attaches adapters to every frozen layer that has none.
pub fn attach_to_frozen<T: Scalar>(model: &mut ToyModel<T>, spec: &AdapterSpec) -> Result<Vec<usize>, GrowthError> {
    let targets: Vec<usize> =
        model.layers.iter().enumerate().filter(|(_, l)| l.frozen && l.adapters.is_none()).map(|(i, _)| i).collect();
    if !targets.is_empty() {
        attach_adapters(model, &targets, spec)?;
    }
    Ok(targets)
}

/// Folds every adapter into its base matrix and removes it. Returns the
/// indices of the layers that had adapters.
pub fn merge_adapters<T: Scalar>(model: &mut ToyModel<T>) -> Vec<usize> {
    let mut merged = Vec::new();
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let Some(adapters) = layer.adapters.take() else { continue };
        for (w, ad) in layer.weights.iter_mut().zip(adapters.iter()) {
            if ad.a.data().iter().all(|v| v.is_zero()) {
                continue;
            }
            let delta = ad.delta();
            for (x, dx) in w.data_mut().iter_mut().zip(delta.data()) {
                *x += *dx;
            }
        }
        merged.push(i);
    }
    merged
}

/// Merges the current adapters and attaches fresh ones to the same layers.
pub fn reset_adapters<T: Scalar>(model: &mut ToyModel<T>, spec: &AdapterSpec) -> Result<Vec<usize>, GrowthError> {
    let layers = merge_adapters(model);
    if layers.is_empty() {
        return Err(GrowthError::NoAdapters);
    }
    attach_adapters(model, &layers, spec)?;
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ToyModelConfig};

    fn slots(n: usize, m: usize, position: GrowthPosition) -> Vec<Slot> {
        growth_layout(n, &GrowthSpec { position, ..GrowthSpec::new(m) })
    }

    #[test]
    fn layouts_place_new_layers() {
        use Slot::*;
        assert_eq!(
            slots(2, 2, GrowthPosition::Upper),
            vec![Existing(0), Existing(1), New { source: 0 }, New { source: 1 }]
        );
        assert_eq!(
            slots(2, 2, GrowthPosition::Intermediate),
            vec![Existing(0), New { source: 0 }, Existing(1), New { source: 1 }]
        );
        assert_eq!(
            slots(2, 2, GrowthPosition::Lower),
            vec![New { source: 0 }, New { source: 1 }, Existing(0), Existing(1)]
        );
        assert_eq!(
            slots(4, 2, GrowthPosition::Intermediate),
            vec![Existing(0), New { source: 0 }, Existing(1), Existing(2), New { source: 2 }, Existing(3)]
        );
        assert_eq!(slots(1, 3, GrowthPosition::Upper)[1..], [New { source: 0 }, New { source: 0 }, New { source: 0 }]);
    }

    #[test]
    fn random_layout_is_reproducible() {
        let a = slots(5, 3, GrowthPosition::Random { seed: 9 });
        assert_eq!(a, slots(5, 3, GrowthPosition::Random { seed: 9 }));
        assert_eq!(a.iter().filter(|s| matches!(s, Slot::New { .. })).count(), 3);
        let order: Vec<usize> = a.iter().filter_map(|s| if let Slot::Existing(i) = s { Some(*i) } else { None }).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn copy_and_mean_initialisation() {
        let cfg = ToyModelConfig::new(12, 2, 2, 8);
        let base = build_model::<f64>(cfg, 1).unwrap();
        let mut m = base.clone();
        let spec = GrowthSpec { position: GrowthPosition::Intermediate, init: GrowthInit::Copy, ..GrowthSpec::new(2) };
        assert_eq!(grow(&mut m, &spec).unwrap(), vec![1, 3]);
        assert_eq!(m.layers[1].weights, base.layers[0].weights);
        assert_eq!(m.layers[3].weights, base.layers[1].weights);

        let mut m = base.clone();
        let spec = GrowthSpec { position: GrowthPosition::Intermediate, init: GrowthInit::Mean, ..GrowthSpec::new(2) };
        grow(&mut m, &spec).unwrap();
        for (w, (a, b)) in m.layers[1].weights.iter().zip(base.layers[0].weights.iter().zip(&base.layers[1].weights)) {
            for i in 0..w.len() {
                assert_eq!(w.data()[i], (a.data()[i] + b.data()[i]) * 0.5);
            }
        }
        // no existing layer above the top one
        assert_eq!(m.layers[3].weights, base.layers[1].weights);
        assert_eq!(m.config.layer_count, 4);
    }

    #[test]
    fn grow_checks_plan_and_adapters() {
        let cfg = ToyModelConfig::new(12, 2, 2, 8);
        let mut m = build_model::<f32>(cfg, 1).unwrap();
        let plan = StagePlan::new(vec![2, 3]).unwrap();
        assert!(matches!(
            grow_for_stage(&mut m, &plan, 2, &GrowthSpec::new(2)),
            Err(GrowthError::PlanMismatch { .. })
        ));
        assert_eq!(grow(&mut m, &GrowthSpec::new(0)), Err(GrowthError::NoNewLayers));
        freeze_layers(&mut m, &[0]).unwrap();
        attach_adapters(&mut m, &[0], &AdapterSpec::new(2, 0)).unwrap();
        assert_eq!(grow(&mut m, &GrowthSpec::new(1)), Err(GrowthError::AdaptersAttached(0)));
    }

    #[test]
    fn adapter_preconditions_and_counts() {
        let cfg = ToyModelConfig::new(96, 2, 4, 8);
        let mut m = build_model::<f32>(cfg, 1).unwrap();
        assert_eq!(attach_adapters(&mut m, &[0], &AdapterSpec::new(8, 0)), Err(GrowthError::NotFrozen(0)));
        assert_eq!(freeze_layers(&mut m, &[2]), Err(GrowthError::LayerOutOfRange { index: 2, layers: 2 }));
        freeze_layers(&mut m, &[0, 1]).unwrap();
        assert_eq!(m.param_counts().trainable_layer, 0);
        assert_eq!(attach_adapters(&mut m, &[0], &AdapterSpec::new(0, 0)), Err(GrowthError::ZeroRank));
        attach_to_frozen(&mut m, &AdapterSpec::new(8, 0)).unwrap();
        assert_eq!(m.layers[0].adapter_param_count(), 14_592);
        assert_eq!(m.param_counts().adapter, 2 * 14_592);
        assert_eq!(attach_adapters(&mut m, &[1], &AdapterSpec::new(8, 0)), Err(GrowthError::AlreadyAttached(1)));
    }

    #[test]
    fn merge_matches_dense_update() {
        let cfg = ToyModelConfig::new(12, 1, 2, 8);
        let mut m = build_model::<f64>(cfg, 2).unwrap();
        freeze_layers(&mut m, &[0]).unwrap();
        attach_adapters(&mut m, &[0], &AdapterSpec::new(4, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for ad in m.layers[0].adapters.as_mut().unwrap().iter_mut() {
            ad.a = normal_tensor(&mut rng, ad.a.shape(), 0.3);
        }
        let before = m.clone();
        merge_adapters(&mut m);
        assert!(m.layers[0].adapters.is_none());
        for (k, mat) in Matrix::ALL.iter().enumerate() {
            let ad = &before.layers[0].adapters.as_ref().unwrap()[k];
            let (out, inp) = mat.shape(12, 32);
            let w0 = before.layers[0].weight(*mat);
            let w1 = m.layers[0].weight(*mat);
            for o in 0..out {
                for i in 0..inp {
                    let dense: f64 = (0..4).map(|j| ad.a.data()[o * 4 + j] * ad.b.data()[j * inp + i]).sum();
                    let expect = w0.data()[o * inp + i] + 0.25 * dense;
                    assert!((w1.data()[o * inp + i] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn merge_of_fresh_adapters_is_bitwise_noop() {
        let cfg = ToyModelConfig::new(12, 2, 2, 8);
        let mut m = build_model::<f32>(cfg, 2).unwrap();
        freeze_layers(&mut m, &[0, 1]).unwrap();
        let before = m.clone();
        attach_to_frozen(&mut m, &AdapterSpec::new(3, 1)).unwrap();
        assert_eq!(merge_adapters(&mut m), vec![0, 1]);
        assert_eq!(m, before);
        assert_eq!(reset_adapters(&mut m, &AdapterSpec::new(3, 1)), Err(GrowthError::NoAdapters));
    }

    #[test]
    fn parse_positions() {
        assert_eq!("random(4)".parse::<GrowthPosition>().unwrap(), GrowthPosition::Random { seed: 4 });
        assert_eq!("upper".parse::<GrowthPosition>().unwrap().to_string(), "upper");
        assert!("sideways".parse::<GrowthPosition>().is_err());
        assert_eq!("mean".parse::<GrowthInit>().unwrap(), GrowthInit::Mean);
    }
}
