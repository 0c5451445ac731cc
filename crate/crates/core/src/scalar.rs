use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of tensors and model parameters.
///
/// Beyond the usual float arithmetic, an implementation supplies a strided
/// matrix-multiply kernel so that `matmul` and its gradients do not run
/// through a naive triple loop.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c`, all matrices described by row/column
    /// strides. The caller guarantees that every index implied by the
    /// dimensions and strides lies inside the given slices.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn widen(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

/// `c = alpha * a·b + beta * c` for a single row `a`, with `b` and `c`
/// row-contiguous. The general kernel packs all of `b` on every call, which
/// dominates the cost of recurrent steps.
#[allow(clippy::too_many_arguments)]
fn row_times_matrix<T: Float + NumAssign>(
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_step: isize,
    b: &[T],
    b_row_stride: isize,
    beta: T,
    c: &mut [T],
) {
    let c = &mut c[..n];
    if beta == T::zero() {
        c.iter_mut().for_each(|v| *v = T::zero());
    } else if beta != T::one() {
        c.iter_mut().for_each(|v| *v *= beta);
    }
    for p in 0..k {
        let s = alpha * a[p * a_step as usize];
        if s == T::zero() {
            continue;
        }
        let start = p * b_row_stride as usize;
        axpy(s, &b[start..start + n], c);
    }
}

/// `y += s * x`, vectorised with AVX2 when the CPU has it. Rounding is the
/// same on both paths.
fn axpy<T: Float + NumAssign>(s: T, x: &[T], y: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { axpy_avx2(s, x, y) };
            return;
        }
    }
    axpy_plain(s, x, y);
}

#[inline(always)]
fn axpy_plain<T: Float + NumAssign>(s: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += s * xv;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2<T: Float + NumAssign>(s: T, x: &[T], y: &mut [T]) {
    axpy_plain(s, x, y)
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
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
                if m == 1 && b_strides.1 == 1 && c_strides.1 == 1 {
                    row_times_matrix(k, n, alpha, a, a_strides.1, b, b_strides.0, beta, c);
                    return;
                }
                // SAFETY: extents were checked against the slice lengths above.
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

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Sum with a fixed pairwise reduction tree, so the result depends only on
/// the order of `values` and not on how a caller chunks the work.
pub fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().copied().fold(T::zero(), |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, (2, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // transposed a via strides
        let mut c = [0.0f32; 4];
        let a32 = [1.0f32, 2.0, 3.0, 4.0];
        let b32 = [5.0f32, 6.0, 7.0, 8.0];
        f32::gemm(2, 2, 2, 1.0, &a32, (1, 2), &b32, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn pairwise_sum_exact_on_integers() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
        assert_eq!(pairwise_sum::<f32>(&[]), 0.0);
    }
}
