//! Strided row/column-major GEMM over `matrixmultiply`.

/// Strided view of a matrix: element `(i, j)` lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

/// `out[m×n] = a[m×k] · b[k×n] + beta · out`, `out` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() >= m * n);
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let a_last = (m - 1) * a.rs + (k - 1) * a.cs;
    let b_last = (k - 1) * b.rs + (n - 1) * b.cs;
    assert!(a_last < a.data.len() && b_last < b.data.len());
    // SAFETY: bounds of the furthest element touched in each operand are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
