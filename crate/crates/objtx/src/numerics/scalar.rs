//! Scalar abstraction so the whole stack runs in either f32 or f64.
//!
//! f64 is the verification mode (finite-difference gradient checks need the
//! headroom); f32 is the fast mode used for experiments. Checkpoints always
//! store f64 bytes, which widening from f32 reproduces exactly.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type of every tensor in the crate.
///
/// All transcendental functions must be deterministic for a given input so
/// that identical seeds reproduce runs bit for bit.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    /// Short dtype name recorded in checkpoints ("f32" or "f64").
    const DTYPE: &'static str;

    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    /// Gauss error function, accurate to within a few ulp.
    fn erf(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// C := alpha * A * B + beta * C for row-major buffers addressed through
    /// explicit (row, col) strides, so transposed operands need no copy.
    ///
    /// # Safety contract (checked by callers)
    /// `a`, `b`, `c` must cover every element addressed by the stride
    /// patterns for an m x k by k x n product.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(stride_span(m, k, rsa, csa) <= a.len());
        debug_assert!(stride_span(k, n, rsb, csb) <= b.len());
        debug_assert!(stride_span(m, n, rsc, csc) <= c.len());
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn erf(self) -> Self {
        libm::erf(f64::from(self)) as f32
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(stride_span(m, k, rsa, csa) <= a.len());
        debug_assert!(stride_span(k, n, rsb, csb) <= b.len());
        debug_assert!(stride_span(m, n, rsc, csc) <= c.len());
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Number of elements a (rows, cols, rs, cs) access pattern spans, for
/// debug bounds checks. Strides here are always positive.
fn stride_span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_known_values() {
        // erf(1) = 0.8427007929497149, erf(0.5) = 0.5204998778130465
        assert!((Scalar::erf(1.0_f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((Scalar::erf(0.5_f64) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((Scalar::erf(-1.0_f64) + 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((Scalar::erf(1.0_f32) - 0.842_700_8_f32).abs() < 1e-6);
    }

    #[test]
    fn gemm_handles_transposed_strides() {
        // A = [[1,2],[3,4]] row-major; gemm with swapped strides is A^T * A.
        let a = [1.0_f64, 2.0, 3.0, 4.0];
        let mut c = [0.0_f64; 4];
        <f64 as Scalar>::gemm(2, 2, 2, 1.0, &a, 1, 2, &a, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn gemm_accumulates_with_beta_one() {
        let a = [1.0_f32, 0.0, 0.0, 1.0];
        let b = [5.0_f32, 6.0, 7.0, 8.0];
        let mut c = [1.0_f32; 4];
        <f32 as Scalar>::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 1.0, &mut c, 2, 1);
        assert_eq!(c, [6.0, 7.0, 8.0, 9.0]);
    }
}
