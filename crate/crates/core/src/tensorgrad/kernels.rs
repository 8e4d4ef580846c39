//! Raw numeric kernels shared by the forward and backward passes.

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self::strided(rows, cols, cols)
    }

    pub fn strided(rows: usize, cols: usize, row_stride: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: row_stride as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a·b + beta * c` on strided views.
///
/// `a`, `b`, `c` are the buffers starting at the first element of each view.
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    av: Mat,
    b: &[f64],
    bv: Mat,
    beta: f64,
    c: &mut [f64],
    cv: Mat,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner extent");
    assert_eq!(av.rows, cv.rows, "gemm rows");
    assert_eq!(bv.cols, cv.cols, "gemm cols");
    assert!(extent_ok(a.len(), av) && extent_ok(b.len(), bv) && extent_ok(c.len(), cv));
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: extents were checked against the buffer lengths above and the
    // output buffer is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.row_stride,
            av.col_stride,
            b.as_ptr(),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr(),
            cv.row_stride,
            cv.col_stride,
        );
    }
}

fn extent_ok(len: usize, m: Mat) -> bool {
    if m.rows == 0 || m.cols == 0 {
        return true;
    }
    let last = (m.rows as isize - 1) * m.row_stride + (m.cols as isize - 1) * m.col_stride;
    last >= 0 && (last as usize) < len
}

/// Row-wise numerically stable softmax, in place.
pub(crate) fn softmax_rows(buf: &mut [f64], cols: usize) {
    for row in buf.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward of a row-wise softmax: `dx = y ⊙ (g − Σ g⊙y)`.
pub(crate) fn softmax_rows_backward(y: &[f64], g: &[f64], out: &mut [f64], cols: usize) {
    for ((yr, gr), or) in y.chunks(cols).zip(g.chunks(cols)).zip(out.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
}

/// Index into a sequence of length `len` for offset `pos` (may be out of range).
/// Replicate padding clamps; zero padding returns `None`.
#[inline]
pub(crate) fn pad_index(pos: isize, len: usize, replicate: bool) -> Option<usize> {
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else if replicate {
        Some(pos.clamp(0, len as isize - 1) as usize)
    } else {
        None
    }
}
