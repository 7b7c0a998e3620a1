//! Strided matrix multiply-accumulate on `f64` slices.

/// Row/column strides of a matrix view inside a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Layout {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn new(offset: usize, row_stride: usize, col_stride: usize) -> Self {
        Layout {
            offset,
            row_stride,
            col_stride,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c += a · b` where `a` is `m×k`, `b` is `k×n` and `c` is `m×n`.
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(la.last_index(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(lb.last_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(lc.last_index(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` is uniquely
    // borrowed, so the kernel never reads or writes outside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            1.0,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

/// Inner product with independent partial sums, so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}
