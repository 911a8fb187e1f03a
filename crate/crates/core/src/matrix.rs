//! Dense row-major matrices. Rows are batch samples throughout the crate.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// # Panics
    /// If `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(v: &[T]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Zeroes columns `start..end` in every row.
    pub fn zero_columns(&mut self, start: usize, end: usize) {
        for r in 0..self.rows {
            for v in &mut self.row_mut(r)[start..end] {
                *v = T::zero();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `y[b, :] = bias + sum_i x[b, i] * weight[i, :]`, with `weight` stored
/// input-major (`in_dim x out_dim`). Each output accumulates the bias first
/// and then the inputs in ascending order.
pub fn affine_forward<T: Scalar>(x: &Matrix<T>, weight: &[T], bias: &[T]) -> Matrix<T> {
    let out_dim = bias.len();
    let in_dim = x.cols();
    debug_assert_eq!(weight.len(), in_dim * out_dim);
    let mut y = Matrix::zeros(x.rows(), out_dim);
    for b in 0..x.rows() {
        y.row_mut(b).copy_from_slice(bias);
    }
    // input-major loop keeps one weight row hot across the batch
    for i in 0..in_dim {
        let w_row = &weight[i * out_dim..(i + 1) * out_dim];
        for b in 0..x.rows() {
            let xi = x.get(b, i);
            axpy(xi, w_row, y.row_mut(b));
        }
    }
    y
}

/// Accumulates weight and bias gradients of [`affine_forward`] given the
/// output adjoint `g`.
pub fn affine_backward_params<T: Scalar>(
    x: &Matrix<T>,
    g: &Matrix<T>,
    weight_grad: &mut [T],
    bias_grad: &mut [T],
) {
    let out_dim = g.cols();
    for b in 0..g.rows() {
        for (bg, &v) in bias_grad.iter_mut().zip(g.row(b)) {
            *bg += v;
        }
    }
    for i in 0..x.cols() {
        let wg_row = &mut weight_grad[i * out_dim..(i + 1) * out_dim];
        for b in 0..x.rows() {
            let xi = x.get(b, i);
            if xi != T::zero() {
                axpy(xi, g.row(b), wg_row);
            }
        }
    }
}

/// Input adjoint of [`affine_forward`]: `dx[b, i] = sum_o g[b, o] * weight[i, o]`.
pub fn affine_backward_input<T: Scalar>(g: &Matrix<T>, weight: &[T], in_dim: usize) -> Matrix<T> {
    let out_dim = g.cols();
    let mut dx = Matrix::zeros(g.rows(), in_dim);
    for b in 0..g.rows() {
        let g_row = g.row(b);
        let dx_row = dx.row_mut(b);
        for (i, d) in dx_row.iter_mut().enumerate() {
            *d = dot(g_row, &weight[i * out_dim..(i + 1) * out_dim]);
        }
    }
    dx
}

#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let a8 = &a[c * 8..c * 8 + 8];
        let b8 = &b[c * 8..c * 8 + 8];
        for k in 0..8 {
            acc[k] += a8[k] * b8[k];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}
