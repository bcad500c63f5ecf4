//! Floating-point element types the engine is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// f32 or f64.
///
/// Besides the usual float arithmetic this carries the dense matrix kernel,
/// so concrete types can route to a tuned GEMM while the graph code stays
/// generic.
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
    /// Lossless for every literal used in this crate.
    fn lit(v: f64) -> Self;

    /// Rounds to the 32-bit storage format.
    fn to_f32_storage(self) -> f32;

    fn from_f32_storage(v: f32) -> Self;

    /// `c = op(a) · op(b) + beta · c` for an `m×k` by `k×n` product.
    ///
    /// `a` is stored row-major as `m×k`, or as `k×m` when `a_t` is set (and
    /// then used transposed); likewise `b` is `k×n` or `n×k` with `b_t`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    ) {
        Self::gemm_strided(
            m,
            k,
            n,
            a,
            Strides::dense(m, k, a_t),
            b,
            Strides::dense(k, n, b_t),
            beta,
            c,
            Strides::dense(m, n, false),
        )
    }

    /// General-stride `c = a · b + beta · c` over logical `m×k`, `k×n` and
    /// `m×n` views into the given buffers. With `beta = 0` the prior
    /// contents of `c` are ignored.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: Strides,
        b: &[Self],
        sb: Strides,
        beta: Self,
        c: &mut [Self],
        sc: Strides,
    ) {
        naive_gemm_strided(m, k, n, a, sa, b, sb, beta, c, sc)
    }
}

/// Element `(i, j)` of a logical matrix lives at `i·row + j·col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major `rows×cols`, or the transpose of a row-major `cols×rows`.
    pub fn dense(rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            Strides { row: 1, col: rows }
        } else {
            Strides { row: cols, col: 1 }
        }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_lens<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    c: &[T],
    sc: Strides,
) {
    assert!(a.len() >= sa.span(m, k), "gemm: lhs buffer too short");
    assert!(b.len() >= sb.span(k, n), "gemm: rhs buffer too short");
    assert!(c.len() >= sc.span(m, n), "gemm: output buffer too short");
}

/// Reference kernel for dense operands, fixed i-p-j accumulation order.
#[allow(clippy::too_many_arguments)]
pub fn naive_gemm<T: Float + NumAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    naive_gemm_strided(
        m,
        k,
        n,
        a,
        Strides::dense(m, k, a_t),
        b,
        Strides::dense(k, n, b_t),
        beta,
        c,
        Strides::dense(m, n, false),
    )
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm_strided<T: Float + NumAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    sc: Strides,
) {
    check_gemm_lens(m, k, n, a, sa, b, sb, c, sc);
    for i in 0..m {
        for j in 0..n {
            let out = &mut c[i * sc.row + j * sc.col];
            *out = if beta == T::zero() { T::zero() } else { *out * beta };
        }
        for p in 0..k {
            let av = a[i * sa.row + p * sa.col];
            if av == T::zero() {
                continue;
            }
            for j in 0..n {
                c[i * sc.row + j * sc.col] += av * b[p * sb.row + j * sb.col];
            }
        }
    }
}

macro_rules! tuned_gemm {
    ($ty:ty, $kernel:path) => {
        #[allow(clippy::too_many_arguments)]
        fn gemm_strided(
            m: usize,
            k: usize,
            n: usize,
            a: &[$ty],
            sa: Strides,
            b: &[$ty],
            sb: Strides,
            beta: $ty,
            c: &mut [$ty],
            sc: Strides,
        ) {
            check_gemm_lens(m, k, n, a, sa, b, sb, c, sc);
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                for i in 0..m {
                    for j in 0..n {
                        let out = &mut c[i * sc.row + j * sc.col];
                        *out = if beta == 0.0 { 0.0 } else { *out * beta };
                    }
                }
                return;
            }
            // SAFETY: the buffer lengths were checked above to cover every
            // offset the logical shapes and strides address.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    sa.row as isize,
                    sa.col as isize,
                    b.as_ptr(),
                    sb.row as isize,
                    sb.col as isize,
                    beta,
                    c.as_mut_ptr(),
                    sc.row as isize,
                    sc.col as isize,
                );
            }
        }
    };
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }

    fn to_f32_storage(self) -> f32 {
        self as f32
    }

    fn from_f32_storage(v: f32) -> Self {
        v as f64
    }

    tuned_gemm!(f64, matrixmultiply::dgemm);
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }

    fn to_f32_storage(self) -> f32 {
        self
    }

    fn from_f32_storage(v: f32) -> Self {
        v
    }

    tuned_gemm!(f32, matrixmultiply::sgemm);
}
