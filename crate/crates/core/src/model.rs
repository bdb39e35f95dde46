//! A miniature pre-norm decoder in the LLaMA family: RMSNorm, rotary
//! multi-head attention and a SwiGLU feed-forward block whose hidden width is
//! `8d/3`, so one layer holds exactly `12d^2 + 2d` parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AttentionLayout, AutodiffError, Graph, Tensor, Var};
use crate::memory::{layer_params, pet_params, ModelShape};
use crate::scalar::Scalar;

pub const BYTE_VOCAB: usize = 256;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch of {tokens} tokens is not {batch} x {seq}")]
    BatchShape { tokens: usize, batch: usize, seq: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub hidden_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Share the input embedding with the output projection.
    #[serde(default)]
    pub tied_embeddings: bool,
}

fn default_vocab() -> usize {
    BYTE_VOCAB
}

impl ToyModelConfig {
    pub fn new(hidden_dim: usize, layer_count: usize, head_count: usize, max_seq_len: usize) -> Self {
        Self { hidden_dim, layer_count, head_count, vocab_size: BYTE_VOCAB, max_seq_len, tied_embeddings: false }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.hidden_dim;
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if d == 0 || !d.is_multiple_of(3) {
            return fail(format!("hidden_dim {d} must be a positive multiple of 3"));
        }
        if self.head_count == 0 || !d.is_multiple_of(self.head_count) {
            return fail(format!("head_count {} must divide hidden_dim {d}", self.head_count));
        }
        if !(d / self.head_count).is_multiple_of(2) {
            return fail(format!("head dimension {} must be even for rotary encoding", d / self.head_count));
        }
        if self.layer_count == 0 {
            return fail("layer_count must be at least 1".into());
        }
        if self.vocab_size == 0 || self.vocab_size > u32::MAX as usize {
            return fail(format!("vocab_size {} out of range", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        8 * self.hidden_dim / 3
    }

    /// Embedding-class parameters: input table, output table unless tied, and
    /// the final norm gain.
    pub fn embedding_params(&self) -> u64 {
        let table = (self.vocab_size * self.hidden_dim) as u64;
        let tables = if self.tied_embeddings { table } else { 2 * table };
        tables + self.hidden_dim as u64
    }

    /// Memory-model shape of this architecture with the embedding add-on.
    pub fn shape(&self, adapter_rank: u64) -> ModelShape {
        ModelShape {
            hidden_dim: self.hidden_dim as u64,
            layer_count: self.layer_count as u64,
            vocab_size: self.vocab_size as u64,
            adapter_rank,
            ffn_dim: self.ffn_dim() as u64,
            embedding_params: self.embedding_params(),
        }
    }
}

/// The seven adaptable matrices of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Matrix {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

impl Matrix {
    pub const ALL: [Matrix; 7] =
        [Matrix::Query, Matrix::Key, Matrix::Value, Matrix::Output, Matrix::Gate, Matrix::Up, Matrix::Down];

    pub fn name(self) -> &'static str {
        match self {
            Matrix::Query => "wq",
            Matrix::Key => "wk",
            Matrix::Value => "wv",
            Matrix::Output => "wo",
            Matrix::Gate => "w_gate",
            Matrix::Up => "w_up",
            Matrix::Down => "w_down",
        }
    }

    /// `(out, in)` for hidden width `d` and FFN width `f`.
    pub fn shape(self, d: usize, f: usize) -> (usize, usize) {
        match self {
            Matrix::Gate | Matrix::Up => (f, d),
            Matrix::Down => (d, f),
            _ => (d, d),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Projections that write into the residual stream.
    pub fn is_residual_output(self) -> bool {
        matches!(self, Matrix::Output | Matrix::Down)
    }
}

/// Low-rank factors on one matrix: effective weight `W + scale * A B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    /// `out x r`, zero at attach time.
    pub a: Tensor<T>,
    /// `r x in`.
    pub b: Tensor<T>,
    pub scale: T,
}

impl<T: Scalar> Adapter<T> {
    pub fn rank(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        (self.a.len() + self.b.len()) as u64
    }

    /// The dense update `scale * A B` with shape `out x in`.
    pub fn delta(&self) -> Tensor<T> {
        let (out, r) = (self.a.shape()[0], self.a.shape()[1]);
        let inp = self.b.shape()[1];
        let mut d = Tensor::zeros(&[out, inp]);
        crate::scalar::gemm(
            self.scale,
            crate::scalar::MatRef::row_major(self.a.data(), out, r),
            crate::scalar::MatRef::row_major(self.b.data(), r, inp),
            T::zero(),
            crate::scalar::MatMut::row_major(d.data_mut(), out, inp),
        );
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// Indexed by [`Matrix::index`].
    pub weights: [Tensor<T>; 7],
    pub attn_gain: Tensor<T>,
    pub ffn_gain: Tensor<T>,
    pub frozen: bool,
    /// One adapter per matrix when attached.
    pub adapters: Option<Box<[Adapter<T>; 7]>>,
}

impl<T: Scalar> Layer<T> {
    pub fn weight(&self, m: Matrix) -> &Tensor<T> {
        &self.weights[m.index()]
    }

    pub fn weight_mut(&mut self, m: Matrix) -> &mut Tensor<T> {
        &mut self.weights[m.index()]
    }

    pub fn param_count(&self) -> u64 {
        let w: usize = self.weights.iter().map(Tensor::len).sum();
        (w + self.attn_gain.len() + self.ffn_gain.len()) as u64
    }

    pub fn adapter_param_count(&self) -> u64 {
        self.adapters.as_ref().map_or(0, |a| a.iter().map(Adapter::param_count).sum())
    }
}

/// Parameter role for accounting and optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Embedding,
    TrainableLayer,
    FrozenLayer,
    Adapter,
}

impl ParamClass {
    pub fn is_trainable(self) -> bool {
        self != ParamClass::FrozenLayer
    }
}

/// Parameter counts partitioned by [`ParamClass`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub embedding: u64,
    pub trainable_layer: u64,
    pub frozen_layer: u64,
    pub adapter: u64,
}

impl ParamCounts {
    pub fn trainable(&self) -> u64 {
        self.embedding + self.trainable_layer + self.adapter
    }

    /// Trainable parameters outside the embedding class.
    pub fn trainable_non_embedding(&self) -> u64 {
        self.trainable_layer + self.adapter
    }

    pub fn total(&self) -> u64 {
        self.trainable() + self.frozen_layer
    }
}

/// A named view of one parameter array.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub class: ParamClass,
    pub tensor: &'a Tensor<T>,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub class: ParamClass,
    pub tensor: &'a mut Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub config: ToyModelConfig,
    pub embed: Tensor<T>,
    /// `None` when tied to `embed`.
    pub unembed: Option<Tensor<T>>,
    pub final_gain: Tensor<T>,
    pub layers: Vec<Layer<T>>,
}

pub(crate) fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

pub(crate) fn new_layer<T: Scalar>(rng: &mut ChaCha8Rng, d: usize, f: usize, total_layers: usize) -> Layer<T> {
    let out_std = INIT_STD / (2.0 * total_layers as f64).sqrt();
    let weights = Matrix::ALL.map(|m| {
        let (o, i) = m.shape(d, f);
        normal_tensor(rng, &[o, i], if m.is_residual_output() { out_std } else { INIT_STD })
    });
    Layer {
        weights,
        attn_gain: Tensor::full(&[d], T::one()),
        ffn_gain: Tensor::full(&[d], T::one()),
        frozen: false,
        adapters: None,
    }
}

/// Initialises a model deterministically from `seed`.
pub fn build_model<T: Scalar>(config: ToyModelConfig, seed: u64) -> Result<ToyModel<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, v) = (config.hidden_dim, config.ffn_dim(), config.vocab_size);
    let embed = normal_tensor(&mut rng, &[v, d], INIT_STD);
    let layers = (0..config.layer_count).map(|_| new_layer(&mut rng, d, f, config.layer_count)).collect();
    let unembed = (!config.tied_embeddings).then(|| normal_tensor(&mut rng, &[v, d], INIT_STD));
    Ok(ToyModel { config, embed, unembed, final_gain: Tensor::full(&[d], T::one()), layers })
}

/// Graph handles for the parameters of one forward pass, in
/// [`ToyModel::params`] order. Frozen arrays are graph constants.
pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl<T: Scalar> ToyModel<T> {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Every parameter array with a stable name, in canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = vec![ParamRef { name: "embed".into(), class: ParamClass::Embedding, tensor: &self.embed }];
        for (i, layer) in self.layers.iter().enumerate() {
            let class = if layer.frozen { ParamClass::FrozenLayer } else { ParamClass::TrainableLayer };
            for m in Matrix::ALL {
                out.push(ParamRef { name: format!("layers.{i}.{}", m.name()), class, tensor: layer.weight(m) });
            }
            out.push(ParamRef { name: format!("layers.{i}.attn_norm"), class, tensor: &layer.attn_gain });
            out.push(ParamRef { name: format!("layers.{i}.ffn_norm"), class, tensor: &layer.ffn_gain });
            if let Some(adapters) = &layer.adapters {
                for (m, ad) in Matrix::ALL.iter().zip(adapters.iter()) {
                    let base = format!("layers.{i}.{}", m.name());
                    out.push(ParamRef { name: format!("{base}.adapter_a"), class: ParamClass::Adapter, tensor: &ad.a });
                    out.push(ParamRef { name: format!("{base}.adapter_b"), class: ParamClass::Adapter, tensor: &ad.b });
                }
            }
        }
        out.push(ParamRef { name: "final_norm".into(), class: ParamClass::Embedding, tensor: &self.final_gain });
        if let Some(u) = &self.unembed {
            out.push(ParamRef { name: "unembed".into(), class: ParamClass::Embedding, tensor: u });
        }
        out
    }

    /// Mutable counterpart of [`ToyModel::params`], same order and names.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = vec![ParamMut { name: "embed".into(), class: ParamClass::Embedding, tensor: &mut self.embed }];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let class = if layer.frozen { ParamClass::FrozenLayer } else { ParamClass::TrainableLayer };
            for (m, w) in Matrix::ALL.iter().zip(layer.weights.iter_mut()) {
                out.push(ParamMut { name: format!("layers.{i}.{}", m.name()), class, tensor: w });
            }
            out.push(ParamMut { name: format!("layers.{i}.attn_norm"), class, tensor: &mut layer.attn_gain });
            out.push(ParamMut { name: format!("layers.{i}.ffn_norm"), class, tensor: &mut layer.ffn_gain });
            if let Some(adapters) = &mut layer.adapters {
                for (m, ad) in Matrix::ALL.iter().zip(adapters.iter_mut()) {
                    let base = format!("layers.{i}.{}", m.name());
                    out.push(ParamMut { name: format!("{base}.adapter_a"), class: ParamClass::Adapter, tensor: &mut ad.a });
                    out.push(ParamMut { name: format!("{base}.adapter_b"), class: ParamClass::Adapter, tensor: &mut ad.b });
                }
            }
        }
        out.push(ParamMut { name: "final_norm".into(), class: ParamClass::Embedding, tensor: &mut self.final_gain });
        if let Some(u) = &mut self.unembed {
            out.push(ParamMut { name: "unembed".into(), class: ParamClass::Embedding, tensor: u });
        }
        out
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for p in self.params() {
            let n = p.tensor.len() as u64;
            match p.class {
                ParamClass::Embedding => c.embedding += n,
                ParamClass::TrainableLayer => c.trainable_layer += n,
                ParamClass::FrozenLayer => c.frozen_layer += n,
                ParamClass::Adapter => c.adapter += n,
            }
        }
        c
    }

    /// Total parameters, or only those an optimiser would update.
    pub fn count_params(&self, trainable_only: bool) -> u64 {
        let c = self.param_counts();
        if trainable_only {
            c.trainable()
        } else {
            c.total()
        }
    }

    /// Closed-form per-layer count for this width (exact since `d % 3 == 0`).
    pub fn expected_layer_params(&self) -> u64 {
        layer_params(self.config.hidden_dim as u64)
    }

    pub fn expected_adapter_params(&self, rank: u64) -> u64 {
        pet_params(self.config.hidden_dim as u64, rank)
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<usize>, ModelError> {
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(ModelError::BatchShape { tokens: tokens.len(), batch, seq });
        }
        if seq > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: seq, max: self.config.max_seq_len });
        }
        let vocab = self.config.vocab_size;
        tokens
            .iter()
            .map(|&t| if (t as usize) < vocab { Ok(t as usize) } else { Err(ModelError::TokenOutOfRange { token: t, vocab }) })
            .collect()
    }

    /// Records the forward pass for a `batch x seq` token block on `g`,
    /// returning flat `[batch * seq, vocab]` logits.
    pub fn forward_graph(&self, g: &mut Graph<T>, tokens: &[u32], batch: usize, seq: usize) -> Result<ForwardPass, ModelError> {
        let ids = self.check_tokens(tokens, batch, seq)?;
        let layout = AttentionLayout { batch, seq, heads: self.config.head_count };
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph<T>, t: &Tensor<T>, trainable: bool| {
            let v = g.leaf(t.clone(), trainable);
            params.push(v);
            v
        };

        let embed = leaf(g, &self.embed, true);
        let mut h = g.embedding(embed, &ids)?;
        for layer in &self.layers {
            let trainable = !layer.frozen;
            let w: Vec<Var> = layer.weights.iter().map(|t| leaf(g, t, trainable)).collect();
            let attn_gain = leaf(g, &layer.attn_gain, trainable);
            let ffn_gain = leaf(g, &layer.ffn_gain, trainable);
            let ad: Option<Vec<(Var, Var, T)>> = layer.adapters.as_ref().map(|ads| {
                ads.iter().map(|a| (leaf(g, &a.a, true), leaf(g, &a.b, true), a.scale)).collect()
            });
            let proj = |g: &mut Graph<T>, x: Var, m: Matrix| -> Result<Var, AutodiffError> {
                let y = g.linear(x, w[m.index()])?;
                match &ad {
                    Some(ad) => {
                        let (a, b, s) = ad[m.index()];
                        let low = g.linear(x, b)?;
                        let up = g.linear(low, a)?;
                        let up = g.scale(up, s)?;
                        g.add(y, up)
                    }
                    None => Ok(y),
                }
            };

            let n = g.rms_norm(h, attn_gain)?;
            let q = proj(g, n, Matrix::Query)?;
            let k = proj(g, n, Matrix::Key)?;
            let v = proj(g, n, Matrix::Value)?;
            let q = g.rope(q, layout)?;
            let k = g.rope(k, layout)?;
            let a = g.causal_attention(q, k, v, layout)?;
            let o = proj(g, a, Matrix::Output)?;
            h = g.add(h, o)?;

            let n = g.rms_norm(h, ffn_gain)?;
            let gate = proj(g, n, Matrix::Gate)?;
            let gate = g.silu(gate)?;
            let up = proj(g, n, Matrix::Up)?;
            let mixed = g.mul(gate, up)?;
            let down = proj(g, mixed, Matrix::Down)?;
            h = g.add(h, down)?;
        }
        let final_gain = leaf(g, &self.final_gain, true);
        let n = g.rms_norm(h, final_gain)?;
        let out_table = match &self.unembed {
            Some(u) => leaf(g, u, true),
            None => embed,
        };
        let logits = g.linear(n, out_table)?;
        Ok(ForwardPass { logits, params })
    }

    /// Logits of shape `[batch, seq, vocab]`.
    pub fn forward(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, tokens, batch, seq)?;
        let logits = g.value(pass.logits).clone();
        Ok(logits.reshape(vec![batch, seq, self.config.vocab_size])?)
    }

    /// Mean next-token cross-entropy of `inputs` against `targets`.
    pub fn loss(&self, inputs: &[u32], targets: &[u32], batch: usize, seq: usize) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, inputs, batch, seq)?;
        let targets = self.check_tokens(targets, batch, seq)?;
        let loss = g.cross_entropy(pass.logits, &targets)?;
        Ok(g.value(loss).item().as_f64())
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> ToyModel<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weights: l.weights.each_ref().map(|w| w.cast()),
                attn_gain: l.attn_gain.cast(),
                ffn_gain: l.ffn_gain.cast(),
                frozen: l.frozen,
                adapters: l.adapters.as_ref().map(|ads| {
                    Box::new(ads.each_ref().map(|a| Adapter {
                        a: a.a.cast(),
                        b: a.b.cast(),
                        scale: U::from_f64_lossy(a.scale.as_f64()),
                    }))
                }),
            })
            .collect();
        ToyModel {
            config: self.config,
            embed: self.embed.cast(),
            unembed: self.unembed.as_ref().map(|u| u.cast()),
            final_gain: self.final_gain.cast(),
            layers,
        }
    }
}
