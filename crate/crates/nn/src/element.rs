//! Row-major strided GEMM dispatch for the two supported element types.

use skilledit_core::Real;

pub trait Element: Real {
    /// `C = alpha * A * B + beta * C` on raw strided views.
    ///
    /// # Safety
    /// All pointers must address `m x k`, `k x n` and `m x n` matrices with
    /// the given strides, fully inside their allocations.
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

impl Element for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, S> {
    pub data: &'a [S],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> View<'a, S> {
    /// Contiguous row-major `rows x cols` matrix.
    pub fn dense(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn check(&self, len: usize) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < len, "strided view exceeds its buffer");
        }
    }
}

/// `C = alpha * A * B + beta * C` where C is a strided view into `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Element>(
    alpha: S,
    a: View<'_, S>,
    b: View<'_, S>,
    beta: S,
    c: &mut [S],
    c_offset: usize,
    rsc: usize,
    csc: usize,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check(a.data.len());
    b.check(b.data.len());
    let cv = View { data: &*c, offset: c_offset, rows: a.rows, cols: b.cols, rs: rsc, cs: csc };
    cv.check(c.len());
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..a.rows {
            for j in 0..b.cols {
                let x = &mut c[c_offset + i * rsc + j * csc];
                *x = beta * *x;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Dense `a [m, k] * b [k, n]`.
pub fn matmul<S: Element>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    gemm(S::one(), View::dense(a, m, k), View::dense(b, k, n), S::zero(), &mut c, 0, n, 1);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_views() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2x3
        let mut c = vec![0.0; 9];
        // a^T a, 3x3
        gemm(1.0, View::dense(&a, 2, 3).t(), View::dense(&a, 2, 3), 0.0, &mut c, 0, 3, 1);
        assert_eq!(c, vec![9.0, 12.0, 15.0, 12.0, 17.0, 22.0, 15.0, 22.0, 29.0]);
    }
}
