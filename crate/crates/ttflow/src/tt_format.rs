//! Tensor trains: cores, entry and fiber evaluation, orthogonalization
//! sweeps, TT-SVD and rounding, TT arithmetic, cross interpolants and a
//! binary checkpoint format.
//!
//! Modes are 0-based (`0..d`). A *level* `k` in `1..d` is the split between
//! modes `0..k` and `k..d`, i.e. the k-th unfolding.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::sampling::NestedIndexSets;
use crate::tensor_core::{norm2, DenseTensor, Matrix, Shape, DENSE_LIMIT};

/// Three-way array `r_left x n x r_right`, entry `(a, i, b)` stored at
/// `a + r_left * (i + n * b)`. Also used for sampled blocks `Y(I, :, J)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TtCore {
    r_left: usize,
    n: usize,
    r_right: usize,
    data: Vec<f64>,
}

impl TtCore {
    pub fn new(r_left: usize, n: usize, r_right: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != r_left * n * r_right {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {r_left}x{n}x{r_right} core",
                data.len()
            )));
        }
        Ok(Self { r_left, n, r_right, data })
    }

    pub fn zeros(r_left: usize, n: usize, r_right: usize) -> Self {
        Self { r_left, n, r_right, data: vec![0.0; r_left * n * r_right] }
    }

    pub fn from_fn(r_left: usize, n: usize, r_right: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(r_left * n * r_right);
        for b in 0..r_right {
            for i in 0..n {
                for a in 0..r_left {
                    data.push(f(a, i, b));
                }
            }
        }
        Self { r_left, n, r_right, data }
    }

    /// Core whose left unfolding is `m` ((r_left n) x r_right).
    pub fn from_left_unfolding(m: Matrix, r_left: usize, n: usize) -> Result<Self> {
        if m.rows() != r_left * n {
            return Err(Error::DimensionMismatch(format!(
                "left unfolding with {} rows for r_left={r_left}, n={n}",
                m.rows()
            )));
        }
        let r_right = m.cols();
        Ok(Self { r_left, n, r_right, data: m.into_vec() })
    }

    /// Core whose right unfolding is `m` (r_left x (n r_right)).
    pub fn from_right_unfolding(m: Matrix, n: usize, r_right: usize) -> Result<Self> {
        if m.cols() != n * r_right {
            return Err(Error::DimensionMismatch(format!(
                "right unfolding with {} columns for n={n}, r_right={r_right}",
                m.cols()
            )));
        }
        let r_left = m.rows();
        Ok(Self { r_left, n, r_right, data: m.into_vec() })
    }

    pub fn r_left(&self) -> usize {
        self.r_left
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r_right(&self) -> usize {
        self.r_right
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, a: usize, i: usize, b: usize) -> f64 {
        self.data[a + self.r_left * (i + self.n * b)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, i: usize, b: usize, v: f64) {
        self.data[a + self.r_left * (i + self.n * b)] = v;
    }

    pub fn left_unfolding(&self) -> Matrix {
        Matrix::from_vec(self.r_left * self.n, self.r_right, self.data.clone()).expect("core size")
    }

    pub fn right_unfolding(&self) -> Matrix {
        Matrix::from_vec(self.r_left, self.n * self.r_right, self.data.clone()).expect("core size")
    }

    /// Slice `C(i)` as an r_left x r_right matrix.
    pub fn slice(&self, i: usize) -> Matrix {
        Matrix::from_fn(self.r_left, self.r_right, |a, b| self.get(a, i, b))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// `row * C(i)` for a row vector of length r_left.
    pub fn row_times_slice(&self, row: &[f64], i: usize) -> Vec<f64> {
        (0..self.r_right)
            .map(|b| {
                let off = self.r_left * (i + self.n * b);
                row.iter().zip(&self.data[off..off + self.r_left]).map(|(x, y)| x * y).sum()
            })
            .collect()
    }

    /// `C(i) * col` for a column vector of length r_right.
    pub fn slice_times_col(&self, i: usize, col: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.r_left];
        for (b, &w) in col.iter().enumerate() {
            let off = self.r_left * (i + self.n * b);
            for (o, &c) in out.iter_mut().zip(&self.data[off..off + self.r_left]) {
                *o += c * w;
            }
        }
        out
    }

    /// `a * C` acting on the left rank index (a: p x r_left).
    pub fn left_mul(&self, a: &Matrix) -> TtCore {
        let m = linalg::matmul(a, &self.right_unfolding());
        TtCore::from_right_unfolding(m, self.n, self.r_right).expect("left_mul")
    }

    /// `C * b` acting on the right rank index (b: r_right x q).
    pub fn right_mul(&self, b: &Matrix) -> TtCore {
        let m = linalg::matmul(&self.left_unfolding(), b);
        TtCore::from_left_unfolding(m, self.r_left, self.n).expect("right_mul")
    }

    /// Applies `a` (n' x n) along the middle index.
    pub fn mode_mul(&self, a: &Matrix) -> TtCore {
        assert_eq!(a.cols(), self.n);
        let np = a.rows();
        let mut out = TtCore::zeros(self.r_left, np, self.r_right);
        for b in 0..self.r_right {
            let src = Matrix::from_vec(
                self.r_left,
                self.n,
                self.data[b * self.r_left * self.n..(b + 1) * self.r_left * self.n].to_vec(),
            )
            .expect("slab");
            let prod = linalg::matmul_nt(&src, a);
            out.data[b * self.r_left * np..(b + 1) * self.r_left * np].copy_from_slice(prod.data());
        }
        out
    }

    /// Swaps the rank indices: `(a, i, b) -> (b, i, a)`.
    pub fn transposed(&self) -> TtCore {
        TtCore::from_fn(self.r_right, self.n, self.r_left, |b, i, a| self.get(a, i, b))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn axpy(&mut self, s: f64, other: &TtCore) {
        debug_assert_eq!((self.r_left, self.n, self.r_right), (other.r_left, other.n, other.r_right));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }
}

/// Sampled block `Y(I, :, J)`; same layout as a core.
pub type Block = TtCore;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorTrain {
    cores: Vec<TtCore>,
}

impl TensorTrain {
    pub fn new(cores: Vec<TtCore>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::InvalidShape("tensor train without cores".into()));
        }
        if cores[0].r_left != 1 || cores[cores.len() - 1].r_right != 1 {
            return Err(Error::DimensionMismatch("boundary ranks must be 1".into()));
        }
        for (k, w) in cores.windows(2).enumerate() {
            if w[0].r_right != w[1].r_left {
                return Err(Error::DimensionMismatch(format!(
                    "rank mismatch between cores {k} and {}: {} vs {}",
                    k + 1,
                    w[0].r_right,
                    w[1].r_left
                )));
            }
        }
        if cores.iter().any(|c| c.n == 0) {
            return Err(Error::InvalidShape("zero-length mode".into()));
        }
        Ok(Self { cores })
    }

    /// Random TT with standard normal core entries.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], ranks: &[usize], rng: &mut R) -> Result<Self> {
        if ranks.len() != dims.len() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "rank vector of length {} for {} modes",
                ranks.len(),
                dims.len()
            )));
        }
        let cores = dims
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                TtCore::from_fn(ranks[k], n, ranks[k + 1], |_, _, _| rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        Self::new(cores)
    }

    /// Rank-1 TT from one vector per mode.
    pub fn rank_one(factors: &[Vec<f64>]) -> Result<Self> {
        let cores = factors
            .iter()
            .map(|f| TtCore::new(1, f.len(), 1, f.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cores)
    }

    pub fn cores(&self) -> &[TtCore] {
        &self.cores
    }

    pub fn core(&self, k: usize) -> &TtCore {
        &self.cores[k]
    }

    pub fn core_mut(&mut self, k: usize) -> &mut TtCore {
        &mut self.cores[k]
    }

    pub fn into_cores(self) -> Vec<TtCore> {
        self.cores
    }

    pub fn ndim(&self) -> usize {
        self.cores.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.n).collect()
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.dims()).expect("valid cores")
    }

    /// Rank vector `(1, r_1, ..., r_{d-1}, 1)`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cores.iter().map(|c| c.r_left).collect();
        r.push(1);
        r
    }

    /// Interior ranks `r_1..r_{d-1}`.
    pub fn inner_ranks(&self) -> Vec<usize> {
        self.cores[1..].iter().map(|c| c.r_left).collect()
    }

    pub fn num_params(&self) -> usize {
        self.cores.iter().map(|c| c.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.cores.iter().all(|c| c.is_finite())
    }

    fn check_index(&self, idx: &[usize]) -> Result<()> {
        if idx.len() != self.ndim() || idx.iter().zip(&self.cores).any(|(&i, c)| i >= c.n) {
            return Err(Error::IndexOutOfRange(format!("{idx:?} for shape {:?}", self.dims())));
        }
        Ok(())
    }

    pub fn evaluate_entry(&self, idx: &[usize]) -> Result<f64> {
        self.check_index(idx)?;
        Ok(self.entry(idx))
    }

    /// Unchecked entry evaluation.
    pub fn entry(&self, idx: &[usize]) -> f64 {
        let mut v = vec![1.0];
        for (c, &i) in self.cores.iter().zip(idx) {
            v = c.row_times_slice(&v, i);
        }
        v[0]
    }

    /// Row vector `C_0(i_0) ... C_{m-1}(i_{m-1})` of length r_m for a prefix of length m.
    pub fn left_interface(&self, prefix: &[usize]) -> Vec<f64> {
        let mut v = vec![1.0];
        for (c, &i) in self.cores.iter().zip(prefix) {
            v = c.row_times_slice(&v, i);
        }
        v
    }

    /// Column vector `C_m(j_m) ... C_{d-1}(j_{d-1})` of length r_m for a suffix starting at mode m.
    pub fn right_interface(&self, suffix: &[usize]) -> Vec<f64> {
        let d = self.ndim();
        let m = d - suffix.len();
        let mut w = vec![1.0];
        for (c, &i) in self.cores[m..].iter().zip(suffix).rev() {
            w = c.slice_times_col(i, &w);
        }
        w
    }

    /// Interfaces for a list of prefixes of length m, as an |L| x r_m matrix.
    pub fn left_interfaces(&self, prefixes: &[Vec<usize>], m: usize) -> Matrix {
        let r = self.ranks()[m];
        let mut out = Matrix::zeros(prefixes.len(), r);
        for (a, p) in prefixes.iter().enumerate() {
            debug_assert_eq!(p.len(), m);
            for (b, v) in self.left_interface(p).into_iter().enumerate() {
                out[(a, b)] = v;
            }
        }
        out
    }

    /// Interfaces for a list of suffixes starting at mode m, as an r_m x |R| matrix.
    pub fn right_interfaces(&self, suffixes: &[Vec<usize>], m: usize) -> Matrix {
        let r = self.ranks()[m];
        let mut out = Matrix::zeros(r, suffixes.len());
        for (b, s) in suffixes.iter().enumerate() {
            debug_assert_eq!(s.len(), self.ndim() - m);
            out.col_mut(b).copy_from_slice(&self.right_interface(s));
        }
        out
    }

    /// Fiber `Y(fixed_0, ..., :, ..., fixed_{d-1})` along `mode`; `fixed[mode]` is ignored.
    pub fn extract_fiber(&self, mode: usize, fixed: &[usize]) -> Result<Vec<f64>> {
        if mode >= self.ndim() {
            return Err(Error::IndexOutOfRange(format!("mode {mode} of {}", self.ndim())));
        }
        let mut probe = fixed.to_vec();
        if probe.len() == self.ndim() {
            probe[mode] = 0;
        }
        self.check_index(&probe)?;
        let v = self.left_interface(&fixed[..mode]);
        let w = self.right_interface(&fixed[mode + 1..]);
        let c = &self.cores[mode];
        Ok((0..c.n)
            .map(|i| {
                let cw = c.slice_times_col(i, &w);
                v.iter().zip(&cw).map(|(x, y)| x * y).sum()
            })
            .collect())
    }

    /// Block `Y(left, :, right)` at `mode`; `left` holds prefixes of length
    /// `mode`, `right` suffixes over modes `mode+1..d`.
    pub fn subtensor(&self, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>]) -> Result<Block> {
        let d = self.ndim();
        if mode >= d {
            return Err(Error::IndexOutOfRange(format!("mode {mode} of {d}")));
        }
        let dims = self.dims();
        for p in left {
            if p.len() != mode || p.iter().zip(&dims).any(|(&i, &n)| i >= n) {
                return Err(Error::IndexOutOfRange(format!("left index {p:?}")));
            }
        }
        for s in right {
            if s.len() != d - mode - 1 || s.iter().zip(&dims[mode + 1..]).any(|(&i, &n)| i >= n) {
                return Err(Error::IndexOutOfRange(format!("right index {s:?}")));
            }
        }
        Ok(self.subtensor_unchecked(left, mode, right))
    }

    pub fn subtensor_unchecked(&self, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>]) -> Block {
        let a = self.left_interfaces(left, mode);
        let b = self.right_interfaces(right, mode + 1);
        let c = &self.cores[mode];
        let w = linalg::matmul(&a, &c.right_unfolding());
        let w = w.reshape(left.len() * c.n, c.r_right).expect("reshape");
        let out = linalg::matmul(&w, &b);
        TtCore::new(left.len(), c.n, right.len(), out.into_vec()).expect("block size")
    }

    pub fn contract_to_dense(&self) -> Result<DenseTensor> {
        let shape = self.shape();
        if shape.size() > DENSE_LIMIT {
            return Err(Error::TooLarge(shape.size()));
        }
        let mut p = Matrix::identity(1);
        for c in &self.cores {
            let q = linalg::matmul(&p, &c.right_unfolding());
            let rows = p.rows() * c.n;
            p = q.reshape(rows, c.r_right)?;
        }
        DenseTensor::new(shape, p.into_vec())
    }

    pub fn scaled(&self, s: f64) -> TensorTrain {
        let mut t = self.clone();
        t.cores[0].scale(s);
        t
    }

    /// Mode product with `a` (n x n) along `mode`.
    pub fn mode_product(&self, a: &Matrix, mode: usize) -> TensorTrain {
        let mut t = self.clone();
        t.cores[mode] = self.cores[mode].mode_mul(a);
        t
    }

    /// Pointwise scaling along `mode`: entry `(.., i, ..)` times `w[i]`.
    pub fn diag_mode_product(&self, w: &[f64], mode: usize) -> TensorTrain {
        let mut t = self.clone();
        let c = &mut t.cores[mode];
        let (rl, n) = (c.r_left, c.n);
        for b in 0..c.r_right {
            for (i, &wi) in w.iter().enumerate() {
                let off = rl * (i + n * b);
                c.data[off..off + rl].iter_mut().for_each(|x| *x *= wi);
            }
        }
        t
    }

    /// Same tensor with the mode order reversed.
    pub fn reversed(&self) -> TensorTrain {
        TensorTrain { cores: self.cores.iter().rev().map(|c| c.transposed()).collect() }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &TensorTrain) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let mut w = Matrix::identity(1);
        for (a, b) in self.cores.iter().zip(&other.cores) {
            // w' = sum_i A(i)^T w B(i)
            let wb = b.left_mul(&w);
            let au = a.left_unfolding();
            let wbu = wb.left_unfolding();
            w = linalg::matmul_tn(&au, &wbu);
        }
        Ok(w[(0, 0)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        // orthogonalize to avoid cancellation in the Gram recursion
        let mut t = self.clone();
        right_orthogonalize_in_place(&mut t);
        t.cores[0].frobenius_norm()
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"TTCK")?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.ndim() as u64).to_le_bytes())?;
        for n in self.dims() {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for r in self.ranks() {
            w.write_all(&(r as u64).to_le_bytes())?;
        }
        for c in &self.cores {
            for x in &c.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<TensorTrain> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"TTCK" {
            return Err(Error::Format("missing TTCK magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let read_u64 = |r: &mut R| -> Result<usize> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b) as usize)
        };
        let d = read_u64(&mut r)?;
        if d == 0 || d > 1024 {
            return Err(Error::Format(format!("implausible order {d}")));
        }
        let dims = (0..d).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let ranks = (0..=d).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut cores = Vec::with_capacity(d);
        for k in 0..d {
            let len = ranks[k]
                .checked_mul(dims[k])
                .and_then(|x| x.checked_mul(ranks[k + 1]))
                .ok_or_else(|| Error::Format("core size overflow".into()))?;
            let mut data = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            cores.push(TtCore::new(ranks[k], dims[k], ranks[k + 1], data)?);
        }
        TensorTrain::new(cores)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense `U_{<m}` from cores `0..m`: rows colexicographic over modes `0..m`.
pub fn left_partial_dense(cores: &[TtCore]) -> Matrix {
    let mut p = Matrix::identity(1);
    for c in cores {
        let q = linalg::matmul(&p, &c.right_unfolding());
        let rows = p.rows() * c.n;
        p = q.reshape(rows, c.r_right).expect("partial product");
    }
    p
}

/// Dense `V_{>=m}` from the trailing cores: rows colexicographic over those
/// modes, columns the leading rank index.
pub fn right_partial_dense(cores: &[TtCore]) -> Matrix {
    let mut q = Matrix::identity(1);
    for c in cores.iter().rev() {
        q = c.right_mul(&q.transpose()).right_unfolding().transpose();
    }
    q
}

/// Relative threshold below which a QR diagonal entry flags a degenerate level.
pub const DEGENERATE_TOL: f64 = 1e-14;

/// Orthogonalized representations for every level, from one left-to-right
/// QR sweep and one right-to-left LQ sweep.
///
/// With `C_{<k}` the product of the original cores `0..k` and `C_{>=k}` the
/// product of cores `k..d`: `C_{<k} = U_{<k} R_k` and `C_{>=k} = L_k V_{>=k}`,
/// so that the k-th unfolding is `U_{<k} S_k V_{>=k}` with `S_k = R_k L_k`.
#[derive(Debug, Clone)]
pub struct OrthFamily {
    /// Left-orthogonal cores `U_0..U_{d-2}`.
    pub left: Vec<TtCore>,
    /// Right-orthogonal cores for modes `1..d`; `right[k-1]` is mode k.
    pub right: Vec<TtCore>,
    /// `r[k-1] = R_k` for levels `1..d`.
    pub r: Vec<Matrix>,
    /// `l[k-1] = L_k` for levels `1..d`.
    pub l: Vec<Matrix>,
    /// Last core of the left-orthogonal chain, `R_{d-1} C_{d-1}`.
    pub last: TtCore,
    /// Norm-carrying first core of the right-orthogonal chain, `C_0 L_1`.
    pub first: TtCore,
    /// Levels where a QR/LQ diagonal fell below `DEGENERATE_TOL * ||core||`.
    pub degenerate: Vec<usize>,
}

impl OrthFamily {
    pub fn ndim(&self) -> usize {
        self.left.len() + 1
    }

    /// Gauge matrix `S_k` at level k (1-based, `1..d`).
    pub fn gauge(&self, k: usize) -> Matrix {
        linalg::matmul(&self.r[k - 1], &self.l[k - 1])
    }

    /// Singular values of the k-th unfolding.
    pub fn singular_values(&self, k: usize) -> Result<Vec<f64>> {
        linalg::singular_values(&self.gauge(k))
    }

    /// Left-orthogonal core for mode `m < d-1`.
    pub fn u(&self, m: usize) -> &TtCore {
        &self.left[m]
    }

    /// Right-orthogonal core for mode `m >= 1`.
    pub fn v(&self, m: usize) -> &TtCore {
        &self.right[m - 1]
    }

    /// Representation at level k: `U_{<k}`, `S_k`, `V_{>=k}`.
    pub fn at(&self, k: usize) -> OrthogonalizedTt {
        OrthogonalizedTt {
            k,
            left: self.left[..k].to_vec(),
            s: self.gauge(k),
            right: self.right[k - 1..].to_vec(),
        }
    }

    /// Left-orthogonal TT `U_0 ... U_{d-2} (R_{d-1} C_{d-1})`.
    pub fn left_orthogonal_tt(&self) -> TensorTrain {
        let mut cores = self.left.clone();
        cores.push(self.last.clone());
        TensorTrain { cores }
    }

    /// Right-orthogonal TT `(C_0 L_1) V_1 ... V_{d-1}`.
    pub fn right_orthogonal_tt(&self) -> TensorTrain {
        let mut cores = vec![self.first.clone()];
        cores.extend(self.right.iter().cloned());
        TensorTrain { cores }
    }
}

/// `Y = U_{<k} S_k V_{>=k}` at a single level.
#[derive(Debug, Clone)]
pub struct OrthogonalizedTt {
    pub k: usize,
    pub left: Vec<TtCore>,
    pub s: Matrix,
    pub right: Vec<TtCore>,
}

impl OrthogonalizedTt {
    pub fn to_tt(&self) -> TensorTrain {
        let mut cores = self.left.clone();
        let first_right = self.right[0].left_mul(&self.s);
        cores.push(first_right);
        cores.extend(self.right[1..].iter().cloned());
        TensorTrain { cores }
    }
}

fn check_feasible(y: &TensorTrain) -> Result<()> {
    for (k, c) in y.cores.iter().enumerate() {
        if c.r_right > c.r_left * c.n || c.r_left > c.n * c.r_right {
            return Err(Error::DimensionMismatch(format!(
                "core {k} of size {}x{}x{} cannot have full-rank unfoldings",
                c.r_left, c.n, c.r_right
            )));
        }
    }
    Ok(())
}

/// Computes the orthogonalized family for all levels.
pub fn orthogonalize_all(y: &TensorTrain) -> Result<OrthFamily> {
    check_feasible(y)?;
    let d = y.ndim();
    if d < 2 {
        return Err(Error::UnfoldingOutOfRange { k: 1, d });
    }
    let mut degenerate = Vec::new();

    let mut left = Vec::with_capacity(d - 1);
    let mut rs = Vec::with_capacity(d - 1);
    let mut carry = Matrix::identity(1);
    for m in 0..d - 1 {
        let c = y.cores[m].left_mul(&carry);
        let scale = c.frobenius_norm();
        let (q, r) = linalg::qr_thin(&c.left_unfolding());
        if (0..r.rows()).any(|i| r[(i, i)] <= DEGENERATE_TOL * scale) {
            degenerate.push(m + 1);
        }
        left.push(TtCore::from_left_unfolding(q, c.r_left, c.n)?);
        rs.push(r.clone());
        carry = r;
    }
    let last = y.cores[d - 1].left_mul(&carry);

    let mut right = vec![TtCore::zeros(0, 0, 0); d - 1];
    let mut ls = vec![Matrix::zeros(0, 0); d - 1];
    let mut carry = Matrix::identity(1);
    for m in (1..d).rev() {
        let c = y.cores[m].right_mul(&carry);
        let scale = c.frobenius_norm();
        let (l, q) = linalg::lq_thin(&c.right_unfolding());
        if (0..l.rows()).any(|i| l[(i, i)] <= DEGENERATE_TOL * scale) && !degenerate.contains(&m) {
            degenerate.push(m);
        }
        right[m - 1] = TtCore::from_right_unfolding(q, c.n, c.r_right)?;
        ls[m - 1] = l.clone();
        carry = l;
    }
    let first = y.cores[0].right_mul(&carry);
    degenerate.sort_unstable();
    Ok(OrthFamily { left, right, r: rs, l: ls, last, first, degenerate })
}

/// Orthogonalized representation at level `k` in `1..d`.
pub fn orthogonalize(y: &TensorTrain, k: usize) -> Result<OrthogonalizedTt> {
    let d = y.ndim();
    if k == 0 || k >= d {
        return Err(Error::UnfoldingOutOfRange { k, d });
    }
    Ok(orthogonalize_all(y)?.at(k))
}

/// Right-orthogonalizes cores `1..d` in place, reducing ranks where an
/// unfolding has fewer columns than rows.
pub fn right_orthogonalize_in_place(y: &mut TensorTrain) {
    let d = y.ndim();
    for m in (1..d).rev() {
        let (l, q) = linalg::lq_thin(&y.cores[m].right_unfolding());
        let (n, rr) = (y.cores[m].n, y.cores[m].r_right);
        y.cores[m] = TtCore::from_right_unfolding(q, n, rr).expect("lq core");
        y.cores[m - 1] = y.cores[m - 1].right_mul(&l);
    }
}

/// Left-orthogonalizes cores `0..d-1` in place.
pub fn left_orthogonalize_in_place(y: &mut TensorTrain) {
    let d = y.ndim();
    for m in 0..d - 1 {
        let (q, r) = linalg::qr_thin(&y.cores[m].left_unfolding());
        let (rl, n) = (y.cores[m].r_left, y.cores[m].n);
        y.cores[m] = TtCore::from_left_unfolding(q, rl, n).expect("qr core");
        y.cores[m + 1] = y.cores[m + 1].left_mul(&r);
    }
}

/// Truncation control for TT-SVD and rounding.
#[derive(Debug, Clone, PartialEq)]
pub enum Truncation {
    /// Relative Frobenius accuracy `delta`.
    Tolerance(f64),
    /// Upper bound on each interior rank `r_1..r_{d-1}`.
    RankCap(Vec<usize>),
    /// Both a tolerance and caps.
    Both(f64, Vec<usize>),
}

impl Truncation {
    fn delta(&self) -> f64 {
        match self {
            Truncation::Tolerance(d) | Truncation::Both(d, _) => *d,
            Truncation::RankCap(_) => 0.0,
        }
    }

    fn cap(&self, level: usize) -> usize {
        match self {
            Truncation::RankCap(c) | Truncation::Both(_, c) => c.get(level - 1).copied().unwrap_or(usize::MAX),
            Truncation::Tolerance(_) => usize::MAX,
        }
    }
}

/// Smallest rank whose discarded tail has 2-norm at most `budget`, at least 1.
fn truncation_rank(s: &[f64], budget: f64, floor: f64, cap: usize) -> usize {
    let mut r = s.len();
    let mut tail = 0.0;
    while r > 1 {
        let next = tail + s[r - 1] * s[r - 1];
        if next.sqrt() <= budget || s[r - 1] <= floor {
            tail = next;
            r -= 1;
        } else {
            break;
        }
    }
    r.min(cap).max(1)
}

/// TT-SVD of a dense tensor. With a tolerance, each of the d-1 truncations
/// discards at most `delta ||X|| / sqrt(d-1)`.
pub fn tt_svd(x: &DenseTensor, control: &Truncation) -> Result<TensorTrain> {
    let dims = x.dims().to_vec();
    let d = dims.len();
    if d == 1 {
        return TensorTrain::new(vec![TtCore::new(1, dims[0], 1, x.values().to_vec())?]);
    }
    let norm = x.frobenius_norm();
    let budget = control.delta() * norm / ((d - 1) as f64).sqrt();
    let floor = 4.0 * f64::EPSILON * norm;
    let mut cores = Vec::with_capacity(d);
    let mut r_prev = 1;
    let mut rest = Matrix::from_vec(dims[0], x.values().len() / dims[0], x.values().to_vec())?;
    for k in 0..d - 1 {
        let svd = linalg::svd_thin(&rest)?;
        let r = truncation_rank(&svd.s, budget, floor, control.cap(k + 1));
        let u = svd.u.leading_cols(r);
        cores.push(TtCore::from_left_unfolding(u, r_prev, dims[k])?);
        // rest = diag(s) V^T, reshaped to (r n_{k+1}) x (remaining)
        let cols = rest.cols();
        let mut sv = Matrix::zeros(r, cols);
        for j in 0..cols {
            for a in 0..r {
                sv[(a, j)] = svd.s[a] * svd.v[(j, a)];
            }
        }
        r_prev = r;
        let rows = r * dims[k + 1];
        rest = sv.reshape(rows, cols / dims[k + 1])?;
    }
    cores.push(TtCore::new(r_prev, dims[d - 1], 1, rest.into_vec())?);
    TensorTrain::new(cores)
}

/// TT rounding: right-to-left orthogonalization then a truncated SVD sweep.
/// Singular values below a roundoff floor (relative to the product of the
/// input core norms) are always discarded.
pub fn round_with(y: &TensorTrain, control: &Truncation) -> TensorTrain {
    let d = y.ndim();
    if d == 1 {
        return y.clone();
    }
    let scale: f64 = y.cores.iter().map(|c| c.frobenius_norm()).product();
    let mut t = y.clone();
    right_orthogonalize_in_place(&mut t);
    let norm = t.cores[0].frobenius_norm();
    let budget = control.delta() * norm / ((d - 1) as f64).sqrt();
    let floor = 64.0 * f64::EPSILON * scale;
    for m in 0..d - 1 {
        let c = &t.cores[m];
        let (rl, n) = (c.r_left, c.n);
        let svd = linalg::svd_thin(&c.left_unfolding()).expect("svd in rounding");
        let r = truncation_rank(&svd.s, budget, floor, control.cap(m + 1));
        let u = svd.u.leading_cols(r);
        let mut sv = Matrix::zeros(r, svd.v.rows());
        for j in 0..svd.v.rows() {
            for a in 0..r {
                sv[(a, j)] = svd.s[a] * svd.v[(j, a)];
            }
        }
        t.cores[m] = TtCore::from_left_unfolding(u, rl, n).expect("round core");
        t.cores[m + 1] = t.cores[m + 1].left_mul(&sv);
    }
    t
}

pub fn round(y: &TensorTrain, delta: f64) -> TensorTrain {
    round_with(y, &Truncation::Tolerance(delta))
}

pub fn round_to_ranks(y: &TensorTrain, caps: &[usize]) -> TensorTrain {
    round_with(y, &Truncation::RankCap(caps.to_vec()))
}

fn check_same_dims(a: &TensorTrain, b: &TensorTrain) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Sum with rank `r1 + r2` (block-diagonal interior cores).
pub fn add(a: &TensorTrain, b: &TensorTrain) -> Result<TensorTrain> {
    check_same_dims(a, b)?;
    let d = a.ndim();
    if d == 1 {
        let mut c = a.cores[0].clone();
        c.axpy(1.0, &b.cores[0]);
        return TensorTrain::new(vec![c]);
    }
    let mut cores = Vec::with_capacity(d);
    for m in 0..d {
        let (ca, cb) = (&a.cores[m], &b.cores[m]);
        let rl = if m == 0 { 1 } else { ca.r_left + cb.r_left };
        let rr = if m == d - 1 { 1 } else { ca.r_right + cb.r_right };
        let (oa_l, oa_r) = (0, 0);
        let ob_l = if m == 0 { 0 } else { ca.r_left };
        let ob_r = if m == d - 1 { 0 } else { ca.r_right };
        let mut c = TtCore::zeros(rl, ca.n, rr);
        for bb in 0..ca.r_right {
            for i in 0..ca.n {
                for aa in 0..ca.r_left {
                    c.set(aa + oa_l, i, bb + oa_r, ca.get(aa, i, bb));
                }
            }
        }
        for bb in 0..cb.r_right {
            for i in 0..cb.n {
                for aa in 0..cb.r_left {
                    let v = c.get(aa + ob_l, i, bb + ob_r) + cb.get(aa, i, bb);
                    c.set(aa + ob_l, i, bb + ob_r, v);
                }
            }
        }
        cores.push(c);
    }
    TensorTrain::new(cores)
}

/// Linear combination `sum_j w_j Y_j` with rank the sum of the input ranks.
pub fn linear_combination(terms: &[(f64, &TensorTrain)]) -> Result<TensorTrain> {
    let mut acc: Option<TensorTrain> = None;
    for (w, t) in terms {
        let s = t.scaled(*w);
        acc = Some(match acc {
            None => s,
            Some(a) => add(&a, &s)?,
        });
    }
    acc.ok_or_else(|| Error::DimensionMismatch("empty linear combination".into()))
}

/// Entrywise product with rank `r1 * r2` (slice-wise Kronecker products).
pub fn hadamard(a: &TensorTrain, b: &TensorTrain) -> Result<TensorTrain> {
    check_same_dims(a, b)?;
    let cores = a
        .cores
        .iter()
        .zip(&b.cores)
        .map(|(ca, cb)| {
            let (pl, pr) = (cb.r_left, cb.r_right);
            TtCore::from_fn(ca.r_left * pl, ca.n, ca.r_right * pr, |al, i, ar| {
                ca.get(al / pl, i, ar / pr) * cb.get(al % pl, i, ar % pr)
            })
        })
        .collect();
    TensorTrain::new(cores)
}

/// Entry oracle used by cross interpolation.
pub type EntryOracle<'a> = dyn Fn(&[usize]) -> f64 + 'a;

/// Condition number above which an interface matrix is treated as singular.
pub const SINGULAR_COND: f64 = 1e14;

/// Samples `f(left, :, right)` entry by entry.
pub fn sample_block(f: &EntryOracle<'_>, dims: &[usize], left: &[Vec<usize>], mode: usize, right: &[Vec<usize>]) -> Block {
    let n = dims[mode];
    let mut idx = vec![0usize; dims.len()];
    TtCore::from_fn(left.len(), n, right.len(), |a, i, b| {
        idx[..mode].copy_from_slice(&left[a]);
        idx[mode] = i;
        idx[mode + 1..].copy_from_slice(&right[b]);
        f(&idx)
    })
}

/// Samples the pivot matrix `f(left, right)` at a level.
pub fn sample_pivot(f: &EntryOracle<'_>, d: usize, left: &[Vec<usize>], right: &[Vec<usize>]) -> Matrix {
    let mut idx = vec![0usize; d];
    Matrix::from_fn(left.len(), right.len(), |a, b| {
        let k = left[a].len();
        idx[..k].copy_from_slice(&left[a]);
        idx[k..].copy_from_slice(&right[b]);
        f(&idx)
    })
}

/// Tensor cross interpolant `C_m(i) = Y(I^{<=m}, i, I^{>m+1}) Y(I^{<=m+1}, I^{>m+1})^{-1}`
/// with the last core the final sampled block.
pub fn cross_interpolant(f: &EntryOracle<'_>, shape: &Shape, idx: &NestedIndexSets) -> Result<TensorTrain> {
    let dims = shape.dims();
    let d = dims.len();
    let mut cores = Vec::with_capacity(d);
    for m in 0..d {
        let block = sample_block(f, dims, &idx.left[m], m, &idx.right[m + 1]);
        if m == d - 1 {
            cores.push(block);
            break;
        }
        let k = m + 1;
        let pivot = sample_pivot(f, d, &idx.left[k], &idx.right[k]);
        let cond = linalg::cond2(&pivot);
        if !(cond < SINGULAR_COND) {
            return Err(Error::SingularInterface { level: k, cond });
        }
        let lu = Lu::new(&pivot).map_err(|_| Error::SingularInterface { level: k, cond })?;
        let core = lu.solve_right(&block.left_unfolding());
        cores.push(TtCore::from_left_unfolding(core, block.r_left, block.n)?);
    }
    TensorTrain::new(cores)
}

/// QR-stabilized cross interpolant from sampled blocks `Y(I^{<=m}, :, I^{>m+1})`
/// and the within-level DEIM positions `l[m]` (rows of the m-th block's left
/// unfolding, for `m < d-1`): `C_m = Q_m Q_m(l_m, :)^{-1}`.
pub fn cross_interpolant_qr(blocks: &[Block], l: &[Vec<usize>]) -> Result<TensorTrain> {
    let d = blocks.len();
    let mut cores = Vec::with_capacity(d);
    for (m, b) in blocks.iter().enumerate() {
        if m == d - 1 {
            cores.push(b.clone());
            break;
        }
        let unf = b.left_unfolding();
        if unf.rows() < unf.cols() {
            return Err(Error::SingularInterface { level: m + 1, cond: f64::INFINITY });
        }
        let (q, _) = linalg::qr_thin(&unf);
        let ql = q.select_rows(&l[m]);
        let lu = Lu::new(&ql).map_err(|_| Error::SingularInterface { level: m + 1, cond: f64::INFINITY })?;
        let core = lu.solve_right(&q);
        cores.push(TtCore::from_left_unfolding(core, b.r_left, b.n)?);
    }
    TensorTrain::new(cores)
}

/// Condition numbers of `Q_m(l_m, :)` for the QR-stabilized rebuild.
pub fn qr_interface_conds(blocks: &[Block], l: &[Vec<usize>]) -> Vec<f64> {
    blocks[..blocks.len().saturating_sub(1)]
        .iter()
        .zip(l)
        .map(|(b, lm)| {
            let (q, _) = linalg::qr_thin(&b.left_unfolding());
            linalg::cond2(&q.select_rows(lm))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ones_tt_evaluates_to_one() {
        let y = TensorTrain::rank_one(&[vec![1.0; 3], vec![1.0; 4], vec![1.0; 2]]).unwrap();
        assert_eq!(y.evaluate_entry(&[2, 3, 1]).unwrap(), 1.0);
        assert!(y.evaluate_entry(&[3, 0, 0]).is_err());
    }

    #[test]
    fn matrix_case_entry_is_product() {
        let y = TensorTrain::random(&[3, 4], &[1, 2, 1], &mut rng(1)).unwrap();
        let c1 = y.core(0).left_unfolding();
        let c2 = y.core(1).right_unfolding();
        let p = linalg::matmul(&c1, &c2);
        for i in 0..3 {
            for j in 0..4 {
                assert!((y.entry(&[i, j]) - p[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn contraction_matches_entries() {
        let y = TensorTrain::random(&[3, 2, 4, 2], &[1, 2, 3, 2, 1], &mut rng(2)).unwrap();
        let x = y.contract_to_dense().unwrap();
        for p in 0..x.values().len() {
            let idx = x.shape().multi_index(p);
            assert!((x.values()[p] - y.entry(&idx)).abs() < 1e-13);
        }
    }

    #[test]
    fn single_core_contracts_to_vector() {
        let y = TensorTrain::rank_one(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(y.contract_to_dense().unwrap().values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fibers_match_entries() {
        let y = TensorTrain::random(&[3, 5, 4], &[1, 2, 3, 1], &mut rng(3)).unwrap();
        for mode in 0..3 {
            let fixed = [1, 2, 3];
            let f = y.extract_fiber(mode, &fixed).unwrap();
            for (i, v) in f.iter().enumerate() {
                let mut idx = fixed;
                idx[mode] = i;
                assert!((v - y.entry(&idx)).abs() < 1e-14);
            }
        }
        assert!(y.extract_fiber(3, &[0, 0, 0]).is_err());
    }

    #[test]
    fn subtensor_matches_entries() {
        let y = TensorTrain::random(&[3, 4, 2, 3], &[1, 2, 3, 2, 1], &mut rng(4)).unwrap();
        let left = vec![vec![0, 1], vec![2, 3], vec![1, 0]];
        let right = vec![vec![2], vec![0]];
        let b = y.subtensor(&left, 2, &right).unwrap();
        for (a, l) in left.iter().enumerate() {
            for i in 0..2 {
                for (bb, r) in right.iter().enumerate() {
                    let idx = [l[0], l[1], i, r[0]];
                    assert!((b.get(a, i, bb) - y.entry(&idx)).abs() < 1e-14);
                }
            }
        }
        assert!(y.subtensor(&[vec![0]], 2, &right).is_err());
    }

    #[test]
    fn tt_svd_recovers_rank_one() {
        let y = TensorTrain::rank_one(&[vec![1.0, -2.0, 0.5], vec![0.3, 1.0], vec![2.0, 1.0, 1.0, -1.0]]).unwrap();
        let x = y.contract_to_dense().unwrap();
        let t = tt_svd(&x, &Truncation::Tolerance(1e-10)).unwrap();
        assert_eq!(t.ranks(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn add_and_round_cancels() {
        let y = TensorTrain::random(&[3, 4, 3], &[1, 2, 2, 1], &mut rng(5)).unwrap();
        let z = add(&y, &y.scaled(-1.0)).unwrap();
        assert_eq!(z.ranks(), vec![1, 4, 4, 1]);
        let r = round(&z, 1e-12);
        assert_eq!(r.ranks(), vec![1, 1, 1, 1]);
        assert!(r.contract_to_dense().unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let y = TensorTrain::random(&[2, 3, 2], &[1, 2, 2, 1], &mut rng(6)).unwrap();
        let mut buf = Vec::new();
        y.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TTCK");
        let z = TensorTrain::load(buf.as_slice()).unwrap();
        assert_eq!(y, z);
        assert!(TensorTrain::load(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn reversal_reverses_entries() {
        let y = TensorTrain::random(&[2, 3, 4], &[1, 2, 3, 1], &mut rng(7)).unwrap();
        let r = y.reversed();
        assert_eq!(r.dims(), vec![4, 3, 2]);
        assert!((r.entry(&[3, 1, 0]) - y.entry(&[0, 1, 3])).abs() < 1e-14);
    }

    #[test]
    fn dot_matches_dense() {
        let a = TensorTrain::random(&[3, 2, 3], &[1, 2, 2, 1], &mut rng(8)).unwrap();
        let b = TensorTrain::random(&[3, 2, 3], &[1, 3, 2, 1], &mut rng(9)).unwrap();
        let da = a.contract_to_dense().unwrap();
        let db = b.contract_to_dense().unwrap();
        let want: f64 = da.values().iter().zip(db.values()).map(|(x, y)| x * y).sum();
        assert!((a.dot(&b).unwrap() - want).abs() < 1e-12 * want.abs().max(1.0));
        assert!((a.frobenius_norm() - da.frobenius_norm()).abs() < 1e-12 * da.frobenius_norm());
    }
}
