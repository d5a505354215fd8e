//! Forward kernels shared by the recording graph and plain inference code.

use super::{NumError, Tensor};

/// Strided matrix view: `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = alpha * a·b + beta * out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let extent = |r: MatRef<'_>| {
        (r.rows as isize - 1) * r.row_stride + (r.cols as isize - 1) * r.col_stride + 1
    };
    assert!(extent(a) as usize <= a.data.len() && extent(b) as usize <= b.data.len());
    // SAFETY: the extent checks above keep every strided access inside the
    // borrowed slices, and `out` is exclusively borrowed with the exact size.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = x·Wᵀ + b` for `W: out×in`, `b: out`, `x: batch×in`.
pub fn linear_forward(w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor, NumError> {
    let (out_dim, in_dim) = w.dims2()?;
    let (batch, x_cols) = x.dims2()?;
    if x_cols != in_dim {
        return Err(NumError::Shape {
            op: "linear_forward",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    if b.len() != out_dim {
        return Err(NumError::Shape {
            op: "linear_forward (bias)",
            left: w.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(&[batch, out_dim]);
    linear_into(w.data(), Some(b.data()), x.data(), batch, in_dim, out_dim, y.data_mut());
    Ok(y)
}

pub(crate) fn linear_into(
    w: &[f64],
    b: Option<&[f64]>,
    x: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    y: &mut [f64],
) {
    let beta = match b {
        Some(b) => {
            for row in y.chunks_exact_mut(out_dim) {
                row.copy_from_slice(b);
            }
            1.0
        }
        None => 0.0,
    };
    gemm(
        1.0,
        MatRef::row_major(x, batch, in_dim),
        MatRef::row_major(w, out_dim, in_dim).t(),
        beta,
        y,
    );
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Row-wise softmax over the trailing axis, stabilized by the row maximum.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(row)` with max-shift.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
