//! Byte-level corpus loading, deterministic batching and perplexity.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::model::{ModelError, ToyModel};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read corpus {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corpus is empty")]
    Empty,
    #[error("validation fraction {0} must lie in (0, 0.5]")]
    BadFraction(f64),
    #[error("corpus of {len} bytes is too small to split")]
    TooSmall { len: usize },
    #[error("stream of {len} tokens is too short for windows of {seq_len} (needs at least {needed})")]
    StreamTooShort { len: usize, seq_len: usize, needed: usize },
    #[error("batch size and sequence length must be positive")]
    ZeroSize,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// Token ids of one split plus the digest of the corpus it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<u32>,
    /// Hex sha256 of the full corpus.
    pub digest: String,
    pub split: Split,
    /// Byte offset of the first token within the corpus.
    pub offset: usize,
}

impl TokenStream {
    pub fn from_bytes(bytes: &[u8], split: Split) -> Self {
        Self { tokens: bytes.iter().map(|&b| b as u32).collect(), digest: sha256_hex(bytes), split, offset: 0 }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-overlapping next-token windows: `(len - 1) / seq_len`.
    pub fn window_count(&self, seq_len: usize) -> usize {
        self.len().saturating_sub(1).checked_div(seq_len).unwrap_or(0)
    }

    /// `(inputs, targets)` of window `i`.
    pub fn window(&self, i: usize, seq_len: usize) -> (&[u32], &[u32]) {
        let start = i * seq_len;
        (&self.tokens[start..start + seq_len], &self.tokens[start + 1..start + seq_len + 1])
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits raw bytes into a training head and a validation tail.
pub fn split_corpus(bytes: &[u8], validation_fraction: f64) -> Result<(TokenStream, TokenStream), DataError> {
    if !(validation_fraction > 0.0 && validation_fraction <= 0.5) {
        return Err(DataError::BadFraction(validation_fraction));
    }
    if bytes.is_empty() {
        return Err(DataError::Empty);
    }
    let val_len = (bytes.len() as f64 * validation_fraction).round() as usize;
    if val_len == 0 || val_len >= bytes.len() {
        return Err(DataError::TooSmall { len: bytes.len() });
    }
    let cut = bytes.len() - val_len;
    let digest = sha256_hex(bytes);
    let stream = |range: &[u8], split, offset| TokenStream {
        tokens: range.iter().map(|&b| b as u32).collect(),
        digest: digest.clone(),
        split,
        offset,
    };
    Ok((stream(&bytes[..cut], Split::Train, 0), stream(&bytes[cut..], Split::Validation, cut)))
}

/// Reads and concatenates `paths`, then splits the result.
pub fn load_corpus_files(paths: &[PathBuf], validation_fraction: f64) -> Result<(TokenStream, TokenStream), DataError> {
    let mut bytes = Vec::new();
    for path in paths {
        let chunk = std::fs::read(path).map_err(|source| DataError::Io { path: path.clone(), source })?;
        bytes.extend_from_slice(&chunk);
    }
    split_corpus(&bytes, validation_fraction)
}

pub fn load_corpus(path: &Path, validation_fraction: f64) -> Result<(TokenStream, TokenStream), DataError> {
    load_corpus_files(&[path.to_path_buf()], validation_fraction)
}

/// A `batch x seq` block of inputs with next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

/// Shuffled windows of a stream, one epoch at a time. Only full batches are
/// produced.
#[derive(Debug, Clone)]
pub struct Batcher<'a> {
    stream: &'a TokenStream,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

pub fn make_batches(stream: &TokenStream, seq_len: usize, batch_size: usize, seed: u64) -> Result<Batcher<'_>, DataError> {
    if seq_len == 0 || batch_size == 0 {
        return Err(DataError::ZeroSize);
    }
    if stream.len() < seq_len + 1 {
        return Err(DataError::StreamTooShort { len: stream.len(), seq_len, needed: seq_len + 1 });
    }
    let mut b = Batcher { stream, seq_len, batch_size, seed, order: Vec::new(), cursor: 0, epoch: 0 };
    b.shuffle();
    Ok(b)
}

impl<'a> Batcher<'a> {
    fn shuffle(&mut self) {
        self.order = (0..self.stream.window_count(self.seq_len)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn window_count(&self) -> usize {
        self.order.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Window order of the current epoch.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Moves to the next epoch with a fresh shuffle.
    pub fn next_epoch(&mut self) {
        self.epoch += 1;
        self.shuffle();
    }

    pub fn next_batch(&mut self) -> Option<Batch> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let mut inputs = Vec::with_capacity(self.batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(self.batch_size * self.seq_len);
        for &w in &self.order[self.cursor..self.cursor + self.batch_size] {
            let (x, y) = self.stream.window(w, self.seq_len);
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        self.cursor += self.batch_size;
        Some(Batch { inputs, targets, batch: self.batch_size, seq: self.seq_len })
    }
}

impl Iterator for Batcher<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.next_batch()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub tokens: u64,
    /// Mean token cross-entropy in nats.
    pub loss: f64,
    pub ppl: f64,
}

/// Windows evaluated per forward pass.
const EVAL_BATCH: usize = 16;

/// Perplexity over the first `max_windows` sequential windows (all when
/// `None`).
pub fn perplexity_limited<T: Scalar>(
    model: &ToyModel<T>,
    stream: &TokenStream,
    seq_len: usize,
    max_windows: Option<usize>,
) -> Result<EvalReport, DataError> {
    let available = stream.window_count(seq_len);
    if available == 0 {
        return Err(DataError::StreamTooShort { len: stream.len(), seq_len, needed: seq_len + 1 });
    }
    let windows = max_windows.map_or(available, |m| m.min(available).max(1));
    let mut total = 0.0f64;
    let mut start = 0;
    while start < windows {
        let n = EVAL_BATCH.min(windows - start);
        let mut inputs = Vec::with_capacity(n * seq_len);
        let mut targets = Vec::with_capacity(n * seq_len);
        for w in start..start + n {
            let (x, y) = stream.window(w, seq_len);
            inputs.extend_from_slice(x);
            targets.extend(y.iter().map(|&t| t as usize));
        }
        let mut g = Graph::new();
        let pass = model.forward_graph(&mut g, &inputs, n, seq_len)?;
        let loss = g.cross_entropy(pass.logits, &targets).map_err(ModelError::from)?;
        total += g.value(loss).item().as_f64() * (n * seq_len) as f64;
        start += n;
    }
    let tokens = (windows * seq_len) as u64;
    let loss = total / tokens as f64;
    Ok(EvalReport { split: stream.split, tokens, loss, ppl: loss.exp() })
}

/// `exp` of the mean token cross-entropy over all full windows.
pub fn perplexity<T: Scalar>(model: &ToyModel<T>, stream: &TokenStream, seq_len: usize) -> Result<EvalReport, DataError> {
    perplexity_limited(model, stream, seq_len, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_digest() {
        let bytes: Vec<u8> = (0..1000).map(|i| (i % 251) as u8).collect();
        let (train, val) = split_corpus(&bytes, 0.1).unwrap();
        assert_eq!((train.len(), val.len()), (900, 100));
        assert_eq!(val.offset, 900);
        assert_eq!(train.digest, val.digest);
        assert_eq!(split_corpus(&bytes, 0.1).unwrap().0.digest, train.digest);
        assert!(matches!(split_corpus(&[], 0.1), Err(DataError::Empty)));
        assert!(matches!(split_corpus(&bytes, 0.6), Err(DataError::BadFraction(_))));
        assert!(matches!(split_corpus(&bytes, 0.0), Err(DataError::BadFraction(_))));
    }

    #[test]
    fn window_counts() {
        let s = TokenStream::from_bytes(&[0; 10], Split::Train);
        assert_eq!(s.window_count(3), 3);
        let s = TokenStream::from_bytes(&[0; 2 * 9], Split::Train);
        assert_eq!(make_batches(&s, 8, 1, 0).unwrap().window_count(), 2);
        assert!(matches!(make_batches(&s, 18, 1, 0), Err(DataError::StreamTooShort { .. })));
    }

    #[test]
    fn labels_are_shifted_inputs() {
        let bytes: Vec<u8> = (0..50).collect();
        let s = TokenStream::from_bytes(&bytes, Split::Train);
        let mut b = make_batches(&s, 4, 2, 1).unwrap();
        let batch = b.next_batch().unwrap();
        for w in 0..2 {
            for t in 0..4 {
                assert_eq!(batch.targets[w * 4 + t], batch.inputs[w * 4 + t] + 1);
            }
            assert_eq!(batch.inputs[w * 4] % 4, 0);
        }
    }

    #[test]
    fn shuffle_is_seeded() {
        let s = TokenStream::from_bytes(&vec![1; 4001], Split::Train);
        let a = make_batches(&s, 10, 4, 3).unwrap();
        let b = make_batches(&s, 10, 4, 3).unwrap();
        let c = make_batches(&s, 10, 4, 4).unwrap();
        assert_eq!(a.order(), b.order());
        assert_ne!(a.order(), c.order());
        let mut sorted = a.order().to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..400).collect::<Vec<_>>());
        let mut a2 = a.clone();
        a2.next_epoch();
        assert_ne!(a.order(), a2.order());
        assert_eq!(a.count(), 100);
    }
}
