//! Scalar abstraction so the same graph code runs in f32 (training) and
//! f64 (gradient-check tests).

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable as tensor element.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;

    /// C += alpha * A(m x k) * B(k x n), row-major with explicit strides.
    ///
    /// `rs*`/`cs*` are row/column strides in elements, so transposed views
    /// cost nothing.
    #[allow(clippy::too_many_arguments)]
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

impl Real for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
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
        debug_assert!(a.len() >= gemm_span(m, k, rsa, csa));
        debug_assert!(b.len() >= gemm_span(k, n, rsb, csb));
        debug_assert!(c.len() >= gemm_span(m, n, rsc, csc));
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

impl Real for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
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
        debug_assert!(a.len() >= gemm_span(m, k, rsa, csa));
        debug_assert!(b.len() >= gemm_span(k, n, rsb, csb));
        debug_assert!(c.len() >= gemm_span(m, n, rsc, csc));
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

/// Minimum slice length for an (rows x cols) view with the given strides.
fn gemm_span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let span = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    span as usize + 1
}

/// Shorthand for converting literals inside generic code.
#[inline]
pub fn r<R: Real>(x: f64) -> R {
    R::of_f64(x)
}

/// Row-major matmul helpers on plain slices.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    R::gemm(
        m, k, n,
        R::one(),
        a, k as isize, 1,
        b, n as isize, 1,
        R::zero(),
        out, n as isize, 1,
    );
}

/// out += A(m x k) * B^T where B is stored row-major (n x k).
pub fn matmul_nt_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    R::gemm(
        m, k, n,
        R::one(),
        a, k as isize, 1,
        b, 1, k as isize,
        R::one(),
        out, n as isize, 1,
    );
}

/// out += A^T * B where A is stored row-major (k x m), B row-major (k x n).
pub fn matmul_tn_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    R::gemm(
        m, k, n,
        R::one(),
        a, 1, m as isize,
        b, n as isize, 1,
        R::one(),
        out, n as isize, 1,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [0.5f64, 1.0, -1.0, 2.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0f64; 4];
        matmul(&a, &b, 2, 3, 2, &mut c);
        // row0: [1*0.5+2*-1+3*0, 1*1+2*2+3*3] = [-1.5, 14]
        // row1: [4*0.5+5*-1+6*0, 4*1+5*2+6*3] = [-3, 32]
        assert_eq!(c, [-1.5, 14.0, -3.0, 32.0]);
    }

    #[test]
    fn nt_variant_matches_explicit_transpose() {
        let a = [1.0f32, 2.0, 3.0, 4.0]; // 2x2
        let b = [1.0f32, 0.0, 2.0, 1.0]; // 2x2, interpret as B^T
        let mut c = [0.0f32; 4];
        matmul_nt_acc(&a, &b, 2, 2, 2, &mut c);
        // B^T = [[1,2],[0,1]]; A*B^T = [[1, 4],[3,10]]... compute:
        // row0: [1*1+2*0, 1*2+2*1] = [1,4]; row1: [3*1+4*0, 3*2+4*1]=[3,10]
        assert_eq!(c, [1.0, 4.0, 3.0, 10.0]);
    }
}
