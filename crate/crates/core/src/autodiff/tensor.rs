use std::fmt;

use super::AutodiffError;
use crate::scalar::Scalar;

/// Dense row-major array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[.., last_dim]`.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim().max(1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Converts element type, e.g. to run an `f32` model in `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Largest absolute value.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    /// `max |a - b| / max |b|`, the relative change measure used in tests.
    pub fn max_rel_diff(&self, reference: &Self) -> f64 {
        let scale = reference.max_abs();
        if scale == 0.0 {
            self.max_abs_diff(reference)
        } else {
            self.max_abs_diff(reference) / scale
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?}{:?}{}", self.shape, preview, if self.data.len() > 8 { "…" } else { "" })
    }
}
