//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the engine computes in: `f32` or `f64`.
///
/// The `gemm` hook defaults to a portable triple loop; the two float types
/// route it to a blocked kernel instead.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each slice is addressed
    /// as `ptr[i * row_stride + j * col_stride]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], usize, usize),
        b: (&[Self], usize, usize),
        beta: Self,
        c: (&mut [Self], usize, usize),
    ) {
        let (a, rsa, csa) = a;
        let (b, rsb, csb) = b;
        let (c, rsc, csc) = c;
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let slot = &mut c[i * rsc + j * csc];
                *slot = if beta == Self::zero() { alpha * acc } else { alpha * acc + beta * *slot };
            }
        }
    }

    /// Lossless-where-possible conversion from `f64` (constants, RNG output).
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every float scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float scalars convert to f64")
    }
}

macro_rules! blocked_gemm {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], usize, usize),
                b: (&[Self], usize, usize),
                beta: Self,
                c: (&mut [Self], usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.0.len(), m, k, a.1, a.2);
                check_extent(b.0.len(), k, n, b.1, b.2);
                check_extent(c.0.len(), m, n, c.1, c.2);
                // SAFETY: extents were checked above for every operand, so the
                // kernel only touches indices inside the borrowed slices.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    );
                }
            }
        }
    };
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand of {len} elements too short for {rows}x{cols}");
}

blocked_gemm!(f64, matrixmultiply::dgemm);
blocked_gemm!(f32, matrixmultiply::sgemm);
