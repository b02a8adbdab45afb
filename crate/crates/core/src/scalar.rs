use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type accepted by every tensor, layer and loss.
///
/// Implemented for `f32` and `f64`. The gradient-check tolerances used in
/// the tests assume `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a literal; every `f64` constant used in this crate is representable.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::lit(v as f64)
    }

    /// `c[m,n] += a·b` where `a` is `m×k` and `b` is `k×n`, each addressed
    /// by (row, column) element strides; `c` is dense row-major.
    fn gemm_acc(m: usize, k: usize, n: usize, a: (&[Self], usize, usize), b: (&[Self], usize, usize), c: &mut [Self]);
}

/// Checks that every strided access of a `rows×cols` operand is in bounds.
fn assert_span<T>(data: &[T], rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < data.len(), "gemm operand out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_acc(
                m: usize,
                k: usize,
                n: usize,
                (a, rsa, csa): (&[Self], usize, usize),
                (b, rsb, csb): (&[Self], usize, usize),
                c: &mut [Self],
            ) {
                assert_span(a, m, k, rsa, csa);
                assert_span(b, k, n, rsb, csb);
                assert_eq!(c.len(), m * n, "gemm output extent");
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                // SAFETY: every index touched is bounds-checked above and the
                // output does not alias the (shared) inputs.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        1.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
