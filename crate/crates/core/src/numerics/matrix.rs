use super::ops::{softmax_backward_strided, softmax_strided};

/// Row-major `f64` matrix for per-region and per-pair score tables. Unlike
/// [`super::Tensor`] it may have zero rows (an image with no pairs).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Which extent a softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Down each column (over rows).
    Rows,
    /// Along each row (over columns).
    Cols,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix extent");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.at(r, c))
    }

    fn layout(&self, axis: Axis) -> (usize, usize, usize) {
        match axis {
            Axis::Rows => (1, self.rows, self.cols),
            Axis::Cols => (self.rows, self.cols, 1),
        }
    }

    /// Softmax over `axis`; an empty axis yields an empty result.
    pub fn softmax(&self, axis: Axis) -> Matrix {
        let mut out = self.clone();
        let (outer, n, inner) = self.layout(axis);
        if n > 0 {
            softmax_strided(&mut out.data, outer, n, inner);
        }
        out
    }

    /// Vector-Jacobian product of [`Self::softmax`], where `self` is the
    /// softmax output.
    pub fn softmax_backward(&self, upstream: &Matrix, axis: Axis) -> Matrix {
        assert_eq!((self.rows, self.cols), (upstream.rows, upstream.cols));
        let mut grad = Matrix::zeros(self.rows, self.cols);
        let (outer, n, inner) = self.layout(axis);
        softmax_backward_strided(&self.data, &upstream.data, &mut grad.data, outer, n, inner);
        grad
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }
}
