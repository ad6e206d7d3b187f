//! Scalar abstraction so the network and fuse block run in `f32` for
//! training and `f64` for gradient verification.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// Every element addressed through the strides must lie inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix view: `rows × cols`, optionally read transposed.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, R> {
    pub data: &'a [R],
    pub rows: usize,
    pub cols: usize,
}

impl<'a, R: Real> MatRef<'a, R> {
    pub fn new(data: &'a [R], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too small");
        MatRef { data, rows, cols }
    }
}

/// `c (m×n) = alpha * op(a) * op(b) + beta * c`, all buffers row-major.
/// `ta` / `tb` select the transpose of the stored matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    alpha: R,
    a: MatRef<'_, R>,
    ta: bool,
    b: MatRef<'_, R>,
    tb: bool,
    beta: R,
    c: &mut [R],
) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "inner dimensions differ");
    assert!(c.len() >= m * n, "output buffer too small");
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: shapes were checked against the buffer lengths above.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(
            1.0,
            MatRef::new(&a, 2, 3),
            false,
            MatRef::new(&b, 3, 2),
            false,
            0.0,
            &mut c,
        );
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T a is 3x3
        let mut d = [0.0f64; 9];
        gemm(
            1.0,
            MatRef::new(&a, 2, 3),
            true,
            MatRef::new(&a, 2, 3),
            false,
            0.0,
            &mut d,
        );
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        // accumulate with beta = 1 and b^T
        let mut e = [1.0f32; 4];
        let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let bt = [1.0f32, 0.0, 1.0, 0.0, 1.0, 1.0]; // b^T stored 2x3
        gemm(
            1.0,
            MatRef::new(&af, 2, 3),
            false,
            MatRef::new(&bt, 2, 3),
            true,
            1.0,
            &mut e,
        );
        assert_eq!(e, [5.0, 6.0, 11.0, 12.0]);
    }
}
