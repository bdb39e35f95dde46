//! Floating-point scalar abstraction shared by the tensor engine and the toy model.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// A real scalar the autodiff engine can compute with: `f32` for training,
/// `f64` for finite-difference oracles.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short type label written into checkpoint manifests and reports.
    const NAME: &'static str;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// All pointers must address valid storage for the given shapes and
    /// strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided read-only matrix view into a slice.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major contiguous view of a `rows x cols` matrix.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of this view (no data movement).
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn check(&self, len: usize) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
        assert!(last < len, "matrix view out of bounds: {last} >= {len}");
    }
}

/// A strided mutable matrix view.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn row_major(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }
}

/// `out = alpha * a * b + beta * out` with bounds-checked views.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(a.rows, out.rows, "gemm output rows");
    assert_eq!(b.cols, out.cols, "gemm output cols");
    a.check(a.data.len());
    b.check(b.data.len());
    if out.rows > 0 && out.cols > 0 {
        let last = out.offset + (out.rows - 1) * out.row_stride + (out.cols - 1) * out.col_stride;
        assert!(last < out.data.len(), "gemm output view out of bounds");
    }
    if out.rows == 0 || out.cols == 0 {
        return;
    }
    // SAFETY: every view was bounds-checked above; `out` is a unique borrow so it
    // cannot alias the shared inputs.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.data.as_mut_ptr().add(out.offset),
            out.row_stride as isize,
            out.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 4x3, used transposed
        let mut c = vec![0.0; 8];
        gemm(
            1.0,
            MatRef::row_major(&a, 2, 3),
            MatRef::row_major(&b, 4, 3).t(),
            0.0,
            MatMut::row_major(&mut c, 2, 4),
        );
        for i in 0..2 {
            for j in 0..4 {
                let expected: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert_eq!(c[i * 4 + j], expected);
            }
        }
    }

    #[test]
    #[should_panic(expected = "inner dimensions")]
    fn gemm_rejects_mismatched_shapes() {
        let a = vec![0.0f32; 6];
        let mut c = vec![0.0f32; 4];
        gemm(1.0, MatRef::row_major(&a, 2, 3), MatRef::row_major(&a, 2, 3), 0.0, MatMut::row_major(&mut c, 2, 2));
    }
}
