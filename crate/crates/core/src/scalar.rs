//! Floating-point scalar abstraction shared by the model, training and metrics code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type accepted by the numerical core: `f32` for training speed, `f64`
/// for gradient checking and exact probes.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// Short name used in checkpoints and diagnostics.
    const NAME: &'static str;

    /// `c = alpha * a·b + beta * c` for strided row/column-major views.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`; each operand is
    /// described by a row stride and a column stride (in elements).
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "strided view exceeds buffer ({last} >= {len})");
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

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
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every element addressed by the strided views was
                // bounds-checked above; `c` is uniquely borrowed.
                unsafe {
                    $kernel(m, k, n, alpha, a.as_ptr(), a_strides.0, a_strides.1, b.as_ptr(), b_strides.0, b_strides.1, beta, c.as_mut_ptr(), c_strides.0, c_strides.1);
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
