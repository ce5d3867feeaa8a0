/// Strided view of a row-major matrix, possibly transposed.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> View<'a> {
    /// `rows x cols` stored row-major.
    pub fn plain(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// A `rows x cols` window starting at `offset` in a row-major buffer
    /// whose rows are `stride` apart.
    pub fn window(data: &'a [f64], offset: usize, stride: usize) -> Self {
        View {
            data: &data[offset.min(data.len())..],
            row_stride: stride as isize,
            col_stride: 1,
        }
    }

    /// Transpose of [`View::window`].
    pub fn window_t(data: &'a [f64], offset: usize, stride: usize) -> Self {
        View {
            data: &data[offset.min(data.len())..],
            row_stride: 1,
            col_stride: stride as isize,
        }
    }

    /// Whether every element of a `rows x cols` access lies inside `data`.
    fn covers(&self, rows: usize, cols: usize) -> bool {
        if rows == 0 || cols == 0 {
            return true;
        }
        let last = (rows - 1) as isize * self.row_stride + (cols - 1) as isize * self.col_stride;
        (last as usize) < self.data.len()
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out (m x n) = beta * out + a (m x k) * b (k x n)`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), m * n);
    gemm_into(m, k, n, a, b, beta, out, n);
}

/// [`gemm`] into an `m x n` block of a row-major buffer whose rows are
/// `out_stride` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    out: &mut [f64],
    out_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        out_stride >= n && out.len() >= (m - 1) * out_stride + n,
        "gemm output block out of bounds"
    );
    assert!(
        a.covers(m, k) && b.covers(k, n),
        "gemm operand out of bounds"
    );
    if k == 0 {
        for r in 0..m {
            out[r * out_stride..r * out_stride + n]
                .iter_mut()
                .for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: both views were checked to cover their `m x k` / `k x n`
    // extents and `out` covers `m` rows of `n` elements at `out_stride`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            out_stride as isize,
            1,
        );
    }
}
