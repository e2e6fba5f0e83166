//! Dense kernels shared by the graph ops. Matrix products go through
//! `matrixmultiply`, which takes arbitrary row/column strides, so transposed
//! operands never need to be materialized.

/// Strided view of an `m x n` matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols as isize, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols as isize }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows as isize - 1) * self.rs + (cols as isize - 1) * self.cs;
        assert!(last >= 0 && (last as usize) < self.data.len(), "strided view out of bounds");
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n)`, or `+=` when `accumulate`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, c: &mut [f64], accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: both operand views were bounds-checked above and `c` holds at
    // least `m * n` row-major values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Output length of a 1-D convolution, or `None` when the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, Mat::row_major(&a, 2), Mat::row_major(&b, 2), &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // a^T * b
        gemm(2, 2, 2, Mat::transposed(&a, 2), Mat::row_major(&b, 2), &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, Mat::transposed(&a, 2), Mat::row_major(&b, 2), &mut c, true);
        assert_eq!(c, [52.0, 60.0, 76.0, 88.0]);
    }

    #[test]
    fn log_add_matches_direct() {
        let (a, b) = (-1.3_f64, -0.2_f64);
        assert!((log_add(a, b) - (a.exp() + b.exp()).ln()).abs() < 1e-15);
        assert_eq!(log_add(f64::NEG_INFINITY, b), b);
    }

    #[test]
    fn conv_lengths() {
        assert_eq!(conv_out_len(98, 3, 2, 1), Some(49));
        assert_eq!(conv_out_len(49, 3, 2, 1), Some(25));
        assert_eq!(conv_out_len(1, 3, 2, 0), None);
    }
}
