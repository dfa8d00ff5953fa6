//! Dense row-major `f64` tensors.
//!
//! Almost everything in this crate is a rank-2 `(batch, width)` matrix, so the
//! helpers here are matrix-centric. The GEMM kernel is `matrixmultiply`; the
//! transposed products are expressed through strides rather than copies.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A `(1, len)` row vector.
    pub fn row_vector(data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![1, len], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Internal constructor for results of finite arithmetic on finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (a rank-1 tensor is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with `what` in the message if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows into a new `(indices.len(), cols)` matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let c = self.cols();
        let r = self.rows();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Shape(format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self::from_parts(vec![indices.len(), c], data))
    }

    /// Row-wise concatenation `[self | other]`.
    pub fn hcat(&self, other: &Tensor) -> Result<Self> {
        if self.rows() != other.rows() {
            return Err(Error::Shape(format!(
                "hcat row counts differ: {} vs {}",
                self.rows(),
                other.rows()
            )));
        }
        let (a, b) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.rows() * (a + b));
        for i in 0..self.rows() {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self::from_parts(vec![self.rows(), a + b], data))
    }

    /// Splits columns at `at`, the inverse of [`Tensor::hcat`].
    pub fn hsplit(&self, at: usize) -> Result<(Self, Self)> {
        let c = self.cols();
        if at > c {
            return Err(Error::Shape(format!("split at {at} beyond {c} columns")));
        }
        let rows = self.rows();
        let mut left = Vec::with_capacity(rows * at);
        let mut right = Vec::with_capacity(rows * (c - at));
        for i in 0..rows {
            let r = self.row(i);
            left.extend_from_slice(&r[..at]);
            right.extend_from_slice(&r[at..]);
        }
        Ok((
            Self::from_parts(vec![rows, at], left),
            Self::from_parts(vec![rows, c - at], right),
        ))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared Euclidean norm of each row.
    pub fn row_sq_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|v| v * v).sum())
            .collect()
    }

    /// Sum over rows, producing a `cols`-length vector.
    pub fn column_sums(&self) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::Shape(format!("matmul ({m}x{k})·({k2}x{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &rhs.data, (n, 1), &mut out);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, m) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::Shape(format!("t_matmul ({k}x{m})ᵀ·({k2}x{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (1, m), &rhs.data, (n, 1), &mut out);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t ({m}x{k})·({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &rhs.data, (1, k), &mut out);
        Ok(Self::from_parts(vec![m, n], out))
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover m*k, k*n and m*n elements under the given
    // strides, which every caller derives from the tensors' own shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
