//! Scalar abstraction so the whole pipeline can run in f32 (default) or f64
//! (tight-tolerance test mode).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type for tensors, network parameters and losses.
///
/// `f32` is the production precision; `f64` exists for invertibility and
/// gradient checks at much tighter tolerances.
pub trait Scalar:
    Float + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Bit width, used to pick per-precision tolerances in checks.
    const BITS: u32;

    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;

    /// C = alpha * A(m,k) * B(k,n) + beta * C, all row-major contiguous.
    ///
    /// # Safety
    /// `a`, `b`, `c` must hold at least `m*k`, `k*n`, `m*n` elements.
    unsafe fn gemm(
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
    );
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
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
    ) {
        use std::sync::OnceLock;
        static AVX512: OnceLock<bool> = OnceLock::new();
        if *AVX512.get_or_init(crate::tensor::gemm::avx512_available) {
            crate::tensor::gemm::sgemm_avx512(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c);
        } else {
            matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
        }
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn into_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }
}

/// Round half away from zero; the one rounding rule used across the pipeline.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    if x >= 0.0 {
        (x + 0.5).floor()
    } else {
        (x - 0.5).ceil()
    }
}
