use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type of the layer engine (`f32` for training, `f64` for gradient checks).
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    fn cast(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `exp` used in hot loops. Exact for `f64`; a branch-free polynomial
    /// for `f32` with relative error near machine epsilon.
    fn fast_exp(self) -> Self;

    /// `(gelu(x), gelu'(x))` with `gelu(x) = x·Φ(x)`.
    fn gelu_with_grad(self) -> (Self, Self);

    /// `C = alpha·A·B + beta·C` over strided row/column layouts.
    ///
    /// # Safety
    /// All pointers must be valid for every element addressed by the given
    /// dimensions and strides, and `c` must not alias `a` or `b`.
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
}

impl Real for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }
    fn gelu_with_grad(self) -> (Self, Self) {
        // Φ(x) = (1 + erf(x/√2))/2 with erf from Abramowitz & Stegun 7.1.26
        // (absolute error below 1.5e-7); exp(-x²/2) is shared with the density.
        let z = self.abs() * std::f32::consts::FRAC_1_SQRT_2;
        let t = 1.0 / (1.0 + 0.327_591_1 * z);
        let poly = t * (0.254_829_6 + t * (-0.284_496_74 + t * (1.421_413_7 + t * (-1.453_152_1 + t * 1.061_405_4))));
        let e = exp_f32(-0.5 * self * self);
        let cdf = 0.5 * (1.0 + (1.0 - poly * e).copysign(self));
        let pdf = e * 0.398_942_3;
        (self * cdf, cdf + self * pdf)
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn cast(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn fast_exp(self) -> Self {
        self.exp()
    }
    fn gelu_with_grad(self) -> (Self, Self) {
        let cdf = 0.5 * (1.0 + libm::erf(self * std::f64::consts::FRAC_1_SQRT_2));
        let pdf = (-0.5 * self * self).exp() / (2.0 * std::f64::consts::PI).sqrt();
        (self * cdf, cdf + self * pdf)
    }
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `e^x` for `f32` without calls or branches, so loops over it vectorize.
/// Range reduction `x = n·ln2 + r` with `|r| ≤ ln2/2`, then a degree-6
/// Taylor polynomial for `e^r`.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5·2^23: adding and subtracting rounds to nearest
    let x = x.max(-87.0).min(88.0);
    let k = x * std::f32::consts::LOG2_E + ROUND;
    let n = k - ROUND;
    // ln 2 split in two so that n·LN2_HI is exact
    let r = (x - n * 0.693_359_4) + n * 2.121_944_4e-4;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // the low mantissa bits of `k` hold n as a two's-complement offset
    let scale = (k.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127)) << 23;
    p * f32::from_bits(scale)
}

/// Strided view descriptor for [`gemm_strided`].
#[derive(Debug, Clone, Copy)]
pub struct Mat {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Mat {
    pub const fn rows(offset: usize, row_stride: usize) -> Self {
        Mat { offset, row_stride, col_stride: 1 }
    }

    /// The transpose of a row-major matrix starting at `offset` with row stride `row_stride`.
    pub const fn transposed(offset: usize, row_stride: usize) -> Self {
        Mat { offset, row_stride: 1, col_stride: row_stride }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C(m×n) = alpha·A(m×k)·B(k×n) + beta·C` on strided sub-matrices of slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    am: Mat,
    b: &[T],
    bm: Mat,
    beta: T,
    c: &mut [T],
    cm: Mat,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > cm.last(m, n), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cm.offset + i * cm.row_stride + j * cm.col_stride;
                c[idx] = if beta == T::zero() { T::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    assert!(a.len() > am.last(m, k), "gemm: A out of bounds");
    assert!(b.len() > bm.last(k, n), "gemm: B out of bounds");
    // SAFETY: bounds asserted above; `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(am.offset),
            am.row_stride as isize,
            am.col_stride as isize,
            b.as_ptr().add(bm.offset),
            bm.row_stride as isize,
            bm.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cm.offset),
            cm.row_stride as isize,
            cm.col_stride as isize,
        )
    }
}

/// Row-major `C = alpha·op(A)·op(B) + beta·C` where `op(A)` is `m×k` and `op(B)` is `k×n`.
/// With `ta`, `a` holds the `k×m` matrix; with `tb`, `b` holds the `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let am = if ta { Mat::transposed(0, m) } else { Mat::rows(0, k) };
    let bm = if tb { Mat::transposed(0, k) } else { Mat::rows(0, n) };
    gemm_strided(m, k, n, alpha, a, am, b, bm, beta, c, Mat::rows(0, n));
}

/// Dense row-major tensor. Image tensors are laid out `(batch, height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the innermost (channel) dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    /// Number of rows when viewed as a `(rows, last_dim)` matrix.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim().max(1)
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, h, w, c] => (n, h, w, c),
            _ => panic!("expected a 4-d tensor, got shape {:?}", self.shape),
        }
    }

    pub fn dims2(&self) -> (usize, usize) {
        match self.shape[..] {
            [a, b] => (a, b),
            _ => panic!("expected a 2-d tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.numel(), "bad reshape");
        self.shape = shape.to_vec();
        self
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst: f64 = 0.0;
        for i in -8000..8000 {
            let x = i as f32 * 0.01;
            let exact = (x as f64).exp();
            worst = worst.max(((exp_f32(x) as f64) - exact).abs() / exact);
        }
        assert!(worst < 5e-7, "worst relative error {worst}");
        assert_eq!(exp_f32(-1000.0), exp_f32(-87.0));
    }

    #[test]
    fn f32_gelu_tracks_exact() {
        for i in -600..600 {
            let x = i as f32 * 0.01;
            let (g, d) = x.gelu_with_grad();
            let (ge, de) = (x as f64).gelu_with_grad();
            assert!((g as f64 - ge).abs() < 2e-6, "gelu({x})");
            assert!((d as f64 - de).abs() < 2e-6, "gelu'({x})");
        }
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
