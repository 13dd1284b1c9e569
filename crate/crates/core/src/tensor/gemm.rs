//! Strided matrix views over flat buffers and a checked GEMM entry point.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat<'a, T> {
    data: &'a [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> Mat<'a, T> {
    /// Contiguous row-major matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_bounds(data.len(), off, rows, cols, rs, cs);
        Mat { data, off, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Mat { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }
}

pub(crate) struct MatMut<'a, T> {
    data: &'a mut [T],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], off: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        check_bounds(data.len(), off, rows, cols, rs, cs);
        MatMut { data, off, rows, cols, rs, cs }
    }
}

fn check_bounds(len: usize, off: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = off + (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "strided view out of bounds: last index {last}, buffer {len}");
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<T: Real>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let p = c.off + i * c.rs + j * c.cs;
                c.data[p] = if beta == T::zero() { T::zero() } else { c.data[p] * beta };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked on construction and the output
    // buffer is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(1.0, Mat::new(&a, m, k), Mat::new(&b, k, n), 0.0, MatMut::new(&mut c, m, n));
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_views() {
        // a^T b where a is stored k x m
        let (m, k, n) = (3, 4, 2);
        let at: Vec<f64> = (0..k * m).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 + i as f64).collect();
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a[i * k + p] = at[p * m + i];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(1.0, Mat::new(&at, k, m).t(), Mat::new(&b, k, n), 0.0, MatMut::new(&mut c, m, n));
        assert_eq!(c, naive(&a, &b, m, k, n));
    }

    #[test]
    fn accumulates_with_beta() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(1.0, Mat::new(&a, 1, 2), Mat::new(&b, 2, 1), 1.0, MatMut::new(&mut c, 1, 1));
        assert_eq!(c[0], 21.0);
    }
}
