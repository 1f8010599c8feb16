//! Floating-point element types understood by the tensor engine.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Element type of a [`Tensor`](crate::Tensor): `f32` for training, `f64` for
/// gradient verification.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Bytes per element, used by the tensor dump helpers.
    const BYTES: usize;

    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Largest linear offset touched by a strided `rows x cols` matrix.
fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $bytes:expr, $kernel:path) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= extent(m, k, a_strides), "gemm: A too short");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: B too short");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: C too short");
                // SAFETY: the three asserts above bound every offset the kernel
                // reads or writes; `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, 4, matrixmultiply::sgemm);
impl_scalar!(f64, 8, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_operand() {
        // A = [[1,2,3],[4,5,6]], B^T stored row-major as [[1,0,2],[0,1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [1.0f64, 0.0, 2.0, 0.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (3, 1), &bt, (1, 3), 0.0, &mut c, (2, 1));
        assert_eq!(c, [7.0, 5.0, 16.0, 11.0]);
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [2.0f32];
        let b = [3.0f32];
        let mut c = [1.0f32];
        f32::gemm(1, 1, 1, 1.0, &a, (1, 1), &b, (1, 1), 1.0, &mut c, (1, 1));
        assert_eq!(c[0], 7.0);
    }
}
