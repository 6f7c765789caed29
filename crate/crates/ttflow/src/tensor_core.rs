//! Dense d-way tensors in colexicographic (first-index-fastest) layout,
//! column-major matrices, unfoldings and norms.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Upper bound on the number of entries a dense tensor may hold.
pub const DENSE_LIMIT: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("a tensor needs at least one mode".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!("zero-length mode in {dims:?}")));
        }
        let mut total: usize = 1;
        for &n in &dims {
            total = total
                .checked_mul(n)
                .ok_or_else(|| Error::InvalidShape(format!("size of {dims:?} overflows")))?;
        }
        Ok(Self { dims })
    }

    pub fn uniform(n: usize, d: usize) -> Result<Self> {
        Self::new(vec![n; d])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn size(&self) -> usize {
        self.dims.iter().product()
    }

    /// Product of the mode sizes in `range`.
    pub fn prod(&self, range: std::ops::Range<usize>) -> usize {
        self.dims[range].iter().product()
    }

    /// Flat colexicographic position of a multi-index.
    pub fn linear_index(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.dims.len() {
            return Err(Error::IndexOutOfRange(format!(
                "multi-index of length {} for a {}-way tensor",
                idx.len(),
                self.dims.len()
            )));
        }
        let mut pos = 0;
        let mut stride = 1;
        for (&i, &n) in idx.iter().zip(&self.dims) {
            if i >= n {
                return Err(Error::IndexOutOfRange(format!("{idx:?} for shape {:?}", self.dims)));
            }
            pos += i * stride;
            stride *= n;
        }
        Ok(pos)
    }

    pub fn multi_index(&self, mut pos: usize) -> Vec<usize> {
        self.dims
            .iter()
            .map(|&n| {
                let i = pos % n;
                pos /= n;
                i
            })
            .collect()
    }
}

/// Colexicographic linear index of a partial multi-index over `dims`.
pub fn colex(idx: &[usize], dims: &[usize]) -> usize {
    let mut pos = 0;
    let mut stride = 1;
    for (&i, &n) in idx.iter().zip(dims) {
        pos += i * stride;
        stride *= n;
    }
    pos
}

/// Column-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major nested slices (handy in tests).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let m = rows.len();
        let n = if m == 0 { 0 } else { rows[0].len() };
        Self::from_fn(m, n, |i, j| rows[i][j])
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(idx.len(), self.cols, |i, j| self[(idx[i], j)])
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for &j in idx {
            data.extend_from_slice(self.col(j));
        }
        Matrix { rows: self.rows, cols: idx.len(), data }
    }

    /// Leading `cols` columns.
    pub fn leading_cols(&self, cols: usize) -> Matrix {
        Matrix { rows: self.rows, cols, data: self.data[..self.rows * cols].to_vec() }
    }

    /// Reinterprets the column-major data with a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut m = self.clone();
        m.axpy(-1.0, other);
        m
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut m = self.clone();
        m.axpy(1.0, other);
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i + self.rows * j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i + self.rows * j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.size() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for shape {:?}",
                values.len(),
                shape.dims()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.size();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = shape.size();
        let mut idx = vec![0usize; shape.ndim()];
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f(&idx));
            for (i, &dim) in idx.iter_mut().zip(shape.dims()) {
                *i += 1;
                if *i < dim {
                    break;
                }
                *i = 0;
            }
        }
        Self { shape, values }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn ndim(&self) -> usize {
        self.shape.ndim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.values[self.shape.linear_index(idx)?])
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[colex(idx, self.shape.dims())]
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.values)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &DenseTensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &DenseTensor) -> DenseTensor {
        let mut t = self.clone();
        t.axpy(-1.0, other);
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseTensor {
        DenseTensor { shape: self.shape.clone(), values: self.values.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// Applies `a` (n_m x n_m) along mode `m` (0-based).
    pub fn mode_product(&self, a: &Matrix, m: usize) -> DenseTensor {
        let dims = self.shape.dims();
        let n = dims[m];
        assert_eq!(a.cols(), n, "mode product dimension mismatch");
        let left = self.shape.prod(0..m);
        let right = self.shape.prod(m + 1..dims.len());
        let mut out = vec![0.0; self.values.len()];
        let at = a.transpose();
        for b in 0..right {
            let off = b * left * n;
            let slab = Matrix::from_vec(left, n, self.values[off..off + left * n].to_vec())
                .expect("slab size");
            let prod = crate::linalg::matmul(&slab, &at);
            out[off..off + left * n].copy_from_slice(prod.data());
        }
        let mut shape_dims = dims.to_vec();
        shape_dims[m] = a.rows();
        DenseTensor { shape: Shape { dims: shape_dims }, values: out }
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = x.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * s.sqrt()
}

/// Unfolding `Y^<k>` with rows indexed by (i_1..i_k) and columns by (i_{k+1}..i_d).
pub fn unfold(t: &DenseTensor, k: usize) -> Result<Matrix> {
    let d = t.ndim();
    if k == 0 || k >= d {
        return Err(Error::UnfoldingOutOfRange { k, d });
    }
    let rows = t.shape.prod(0..k);
    let cols = t.shape.prod(k..d);
    Matrix::from_vec(rows, cols, t.values.clone())
}

pub fn tensorize(m: &Matrix, shape: &Shape, k: usize) -> Result<DenseTensor> {
    let d = shape.ndim();
    if k == 0 || k >= d {
        return Err(Error::UnfoldingOutOfRange { k, d });
    }
    let rows = shape.prod(0..k);
    let cols = shape.prod(k..d);
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix for unfolding {k} of {:?}",
            m.rows(),
            m.cols(),
            shape.dims()
        )));
    }
    DenseTensor::new(shape.clone(), m.data().to_vec())
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.frobenius_norm()
}

/// `||Y - X||_F / ||X||_F`.
pub fn relative_error(y: &DenseTensor, x: &DenseTensor) -> Result<f64> {
    if y.shape != x.shape {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            y.dims(),
            x.dims()
        )));
    }
    let nx = x.frobenius_norm();
    if nx == 0.0 {
        return Err(Error::ZeroReference);
    }
    let diff: Vec<f64> = y.values.iter().zip(&x.values).map(|(a, b)| a - b).collect();
    Ok(norm2(&diff) / nx)
}
