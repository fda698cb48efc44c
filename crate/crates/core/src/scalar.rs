//! Floating-point scalar abstraction shared by the network engine and the
//! training loops built on it.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Real scalar type the engine is generic over.
///
/// Implemented for `f32` and `f64`. Both implementations route dense
/// products through `matrixmultiply`; checkpoints always store `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `C <- alpha * A * B + beta * C` for strided row/column views.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`. Strides are in
    /// elements and must be non-negative.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("every Scalar converts to f64")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(
                    span(m, k, rsa, csa) <= a.len(),
                    "gemm: A view out of bounds"
                );
                assert!(
                    span(k, n, rsb, csb) <= b.len(),
                    "gemm: B view out of bounds"
                );
                assert!(
                    span(m, n, rsc, csc) <= c.len(),
                    "gemm: C view out of bounds"
                );
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every strided view was checked to lie inside its slice,
                // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);
