//! Pseudo-spectral PDE discretizations exposing the right-hand side densely
//! (reference path) and entry-wise on sampled blocks (low-rank path), plus a
//! dense RK4 reference integrator and a few synthetic test flows.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor_core::{DenseTensor, Matrix, Shape};
use crate::tt_format::{self, hadamard, linear_combination, round, Block, TensorTrain, Truncation, TtCore};

/// Periodic Fourier differentiation matrix of order 1 or 2 on `n` points
/// over a period of length `l`.
pub fn fourier_diff(n: usize, l: f64, order: u32) -> Result<Matrix> {
    if n % 2 != 0 || n < 4 {
        return Err(Error::Config(format!("Fourier differentiation needs even n >= 4, got {n}")));
    }
    let h = 2.0 * PI / n as f64;
    let s = 2.0 * PI / l;
    let sign = |k: i64| if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    match order {
        1 => Ok(Matrix::from_fn(n, n, |j, k| {
            if j == k {
                0.0
            } else {
                let m = j as i64 - k as i64;
                s * 0.5 * sign(m) / (m as f64 * h / 2.0).tan()
            }
        })),
        2 => Ok(Matrix::from_fn(n, n, |j, k| {
            if j == k {
                s * s * (-PI * PI / (3.0 * h * h) - 1.0 / 6.0)
            } else {
                let m = j as i64 - k as i64;
                let sn = (m as f64 * h / 2.0).sin();
                -s * s * sign(m) / (2.0 * sn * sn)
            }
        })),
        _ => Err(Error::Config(format!("unsupported derivative order {order}"))),
    }
}

/// Uniform periodic grid `a + j l / n`.
pub fn periodic_grid(a: f64, l: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| a + j as f64 * l / n as f64).collect()
}

/// Right-hand side `G(X, t)` available densely and entry-wise.
///
/// Implementors either provide [`EntrywiseRhs::local`], the value of `G` at
/// one entry from the fibers of the solution through that entry along every
/// mode (the default block and entry evaluators then fetch those fibers from
/// the TT), or override the block/entry evaluators directly.
pub trait EntrywiseRhs: Send + Sync {
    fn dims(&self) -> &[usize];

    fn eval_dense(&self, u: &DenseTensor, t: f64) -> DenseTensor;

    /// `G` at `idx`; `fibers[m][x]` is the solution at `idx` with mode m set to x.
    fn local(&self, _idx: &[usize], _fibers: &[&[f64]], _t: f64) -> f64 {
        unimplemented!("this right-hand side overrides the block evaluators")
    }

    /// `G(Y, t)` on the block `(left, :, right)` at `mode`.
    fn eval_block(&self, y: &TensorTrain, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>], t: f64) -> Block {
        let fibers = BlockFibers::new(y, left, mode, right);
        let n = y.core(mode).n();
        let d = y.ndim();
        let mut idx = vec![0usize; d];
        let mut views: Vec<&[f64]> = Vec::with_capacity(d);
        TtCore::from_fn(left.len(), n, right.len(), |a, i, b| {
            idx[..mode].copy_from_slice(&left[a]);
            idx[mode] = i;
            idx[mode + 1..].copy_from_slice(&right[b]);
            let e = a + left.len() * (i + n * b);
            views.clear();
            for m in 0..d {
                views.push(fibers.fiber(m, e));
            }
            self.local(&idx, &views, t)
        })
    }

    /// `G(Y, t)` at arbitrary entries.
    fn eval_entries(&self, y: &TensorTrain, entries: &[Vec<usize>], t: f64) -> Vec<f64> {
        let d = y.ndim();
        entries
            .iter()
            .map(|idx| {
                let fibers: Vec<Vec<f64>> =
                    (0..d).map(|m| y.extract_fiber(m, idx).expect("entry in range")).collect();
                let views: Vec<&[f64]> = fibers.iter().map(|f| f.as_slice()).collect();
                self.local(idx, &views, t)
            })
            .collect()
    }
}

/// Fibers of a TT through every entry of a block `(left, :, right)` at `mode`,
/// formed with matrix products over cached interfaces. Fiber `m` of block
/// entry `e = a + |L| (i + n b)` is stored contiguously.
pub struct BlockFibers {
    fibers: Vec<Vec<f64>>,
    lens: Vec<usize>,
}

impl BlockFibers {
    pub fn new(y: &TensorTrain, left: &[Vec<usize>], k: usize, right: &[Vec<usize>]) -> Self {
        let d = y.ndim();
        let dims = y.dims();
        let (nl, n, nr) = (left.len(), dims[k], right.len());
        let entries = nl * n * nr;
        let ck = y.core(k);
        let mut fibers = vec![Vec::new(); d];

        // own mode: the block itself
        let block = y.subtensor_unchecked(left, k, right);
        let mut own = vec![0.0; entries * n];
        for b in 0..nr {
            for i in 0..n {
                for a in 0..nl {
                    let e = a + nl * (i + n * b);
                    for x in 0..n {
                        own[e * n + x] = block.get(a, x, b);
                    }
                }
            }
        }
        fibers[k] = own;

        if k > 0 {
            // W(:, i + n b) = C_k(i) * right interface b
            let rif = y.right_interfaces(right, k + 1);
            let w = ck.right_mul(&rif).right_unfolding();
            for j in 0..k {
                let nj = dims[j];
                let mut buf = vec![0.0; entries * nj];
                for (a, l) in left.iter().enumerate() {
                    let lif = y.left_interface(&l[..j]);
                    let row = Matrix::from_vec(1, lif.len(), lif).unwrap();
                    // T(x, :) = a C_j(x) mid
                    let mut t = y.core(j).left_mul(&row).left_unfolding();
                    for (jj, &ix) in l.iter().enumerate().take(k).skip(j + 1) {
                        t = linalg::matmul(&t, &y.core(jj).slice(ix));
                    }
                    let f = linalg::matmul(&t, &w);
                    for c in 0..n * nr {
                        let e = a + nl * c;
                        buf[e * nj..(e + 1) * nj].copy_from_slice(f.col(c));
                    }
                }
                fibers[j] = buf;
            }
        }
        if k + 1 < d {
            // A(a + |L| i, :) = left interface a * C_k(i)
            let lif = y.left_interfaces(left, k);
            let a_mat = linalg::matmul(&lif, &ck.right_unfolding())
                .reshape(nl * n, ck.r_right())
                .unwrap();
            let at = a_mat.transpose();
            for j in k + 1..d {
                let nj = dims[j];
                let mut buf = vec![0.0; entries * nj];
                for (b, r) in right.iter().enumerate() {
                    // suffix r covers modes k+1..d; r[j-k-1] is mode j
                    let off = j - k - 1;
                    let c = y.right_interface(&r[off + 1..]);
                    let col = Matrix::from_vec(c.len(), 1, c).unwrap();
                    let mut t = y.core(j).right_mul(&col).right_unfolding();
                    for jj in (k + 1..j).rev() {
                        t = linalg::matmul(&y.core(jj).slice(r[jj - k - 1]), &t);
                    }
                    // F^T = T^T A^T : n_j x (|L| n)
                    let f = linalg::matmul_tn(&t, &at);
                    for c in 0..nl * n {
                        let e = c + nl * n * b;
                        buf[e * nj..(e + 1) * nj].copy_from_slice(f.col(c));
                    }
                }
                fibers[j] = buf;
            }
        }
        Self { fibers, lens: dims }
    }

    pub fn fiber(&self, mode: usize, entry: usize) -> &[f64] {
        let n = self.lens[mode];
        &self.fibers[mode][entry * n..(entry + 1) * n]
    }
}

/// Right-hand side available in TT arithmetic, for step truncation.
pub trait LowRankRhs: Send + Sync {
    /// `G(Y, t)` as a TT, with intermediate truncations at relative accuracy `delta`.
    fn eval_tt(&self, y: &TensorTrain, t: f64, delta: f64) -> Result<TensorTrain>;
}

/// Low-rank right-hand side through the dense evaluator followed by TT-SVD.
pub struct DenseFallback<'a>(pub &'a dyn EntrywiseRhs);

impl LowRankRhs for DenseFallback<'_> {
    fn eval_tt(&self, y: &TensorTrain, t: f64, delta: f64) -> Result<TensorTrain> {
        let g = self.0.eval_dense(&y.contract_to_dense()?, t);
        if g.frobenius_norm() == 0.0 {
            return Ok(y.scaled(0.0));
        }
        tt_format::tt_svd(&g, &Truncation::Tolerance(delta))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub dims: Vec<usize>,
    /// Left endpoint and period for each mode.
    pub domain: Vec<(f64, f64)>,
}

impl ProblemSpec {
    pub fn grid(&self, mode: usize) -> Vec<f64> {
        let (a, l) = self.domain[mode];
        periodic_grid(a, l, self.dims[mode])
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.dims.clone()).expect("valid dims")
    }

    /// Samples `f(x)` on the tensor grid.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> DenseTensor {
        let grids: Vec<Vec<f64>> = (0..self.dims.len()).map(|m| self.grid(m)).collect();
        let mut x = vec![0.0; self.dims.len()];
        DenseTensor::from_fn(self.shape(), |idx| {
            for (m, &i) in idx.iter().enumerate() {
                x[m] = grids[m][i];
            }
            f(&x)
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 2D transport `u_t = -v u_x - E(x) u_v` on `[-1,1]^2` with the prescribed
/// field `E(x) = 0.5 sin(pi x)`.
pub struct VlasovPoisson2d {
    pub spec: ProblemSpec,
    d1: Matrix,
    x: Vec<f64>,
    v: Vec<f64>,
    e: Vec<f64>,
}

impl VlasovPoisson2d {
    pub fn new(n: usize) -> Result<Self> {
        let spec = ProblemSpec { name: "vlasov_poisson_2d".into(), dims: vec![n, n], domain: vec![(-1.0, 2.0); 2] };
        let d1 = fourier_diff(n, 2.0, 1)?;
        let x = spec.grid(0);
        let v = spec.grid(1);
        let e = x.iter().map(|&x| 0.5 * (PI * x).sin()).collect();
        Ok(Self { spec, d1, x, v, e })
    }

    pub fn initial_condition(&self) -> DenseTensor {
        self.spec.sample(|p| (-20.0 * (p[0] * p[0] + p[1] * p[1])).exp())
    }

    pub fn grid_x(&self) -> &[f64] {
        &self.x
    }
}

impl EntrywiseRhs for VlasovPoisson2d {
    fn dims(&self) -> &[usize] {
        &self.spec.dims
    }

    fn eval_dense(&self, u: &DenseTensor, _t: f64) -> DenseTensor {
        let ux = u.mode_product(&self.d1, 0);
        let uv = u.mode_product(&self.d1, 1);
        let n = self.spec.dims[0];
        let mut g = DenseTensor::zeros(u.shape().clone());
        for j in 0..self.spec.dims[1] {
            for i in 0..n {
                let p = i + n * j;
                g.values_mut()[p] = -self.v[j] * ux.values()[p] - self.e[i] * uv.values()[p];
            }
        }
        g
    }

    fn local(&self, idx: &[usize], fibers: &[&[f64]], _t: f64) -> f64 {
        let (i, j) = (idx[0], idx[1]);
        let n = self.spec.dims[0];
        let dx: f64 = (0..n).map(|x| self.d1[(i, x)] * fibers[0][x]).sum();
        let dv: f64 = (0..self.spec.dims[1]).map(|y| self.d1[(j, y)] * fibers[1][y]).sum();
        -self.v[j] * dx - self.e[i] * dv
    }
}

impl LowRankRhs for VlasovPoisson2d {
    fn eval_tt(&self, y: &TensorTrain, _t: f64, delta: f64) -> Result<TensorTrain> {
        let a = y.mode_product(&self.d1, 0).diag_mode_product(&self.v, 1);
        let b = y.diag_mode_product(&self.e, 0).mode_product(&self.d1, 1);
        Ok(round(&linear_combination(&[(-1.0, &a), (-1.0, &b)])?, delta))
    }
}

/// 3D Allen-Cahn `u_t = alpha Lap u + u - u^3` on `[0, 2pi]^3`.
pub struct AllenCahn3d {
    pub spec: ProblemSpec,
    pub alpha: f64,
    d2: Matrix,
}

/// The building block of the Allen-Cahn initial condition.
pub fn allen_cahn_g(x1: f64, x2: f64, x3: f64) -> f64 {
    let num = ((-x1.tan().powi(2)).exp() + (-x2.tan().powi(2)).exp() + (-x3.tan().powi(2)).exp()) * (x1 + x2 + x3).sin();
    let csc = |x: f64| 1.0 / (-x / 2.0).sin();
    let den = 1.0 + csc(x1).abs().exp() + csc(x2).abs().exp() + csc(x3).abs().exp();
    let v = num / den;
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

impl AllenCahn3d {
    pub fn new(n: usize) -> Result<Self> {
        let spec = ProblemSpec { name: "allen_cahn_3d".into(), dims: vec![n; 3], domain: vec![(0.0, 2.0 * PI); 3] };
        let d2 = fourier_diff(n, 2.0 * PI, 2)?;
        Ok(Self { spec, alpha: 0.1, d2 })
    }

    pub fn initial_condition(&self) -> DenseTensor {
        self.spec.sample(|p| {
            let (a, b, c) = (p[0], p[1], p[2]);
            allen_cahn_g(a, b, c) - allen_cahn_g(2.0 * a, b, c) + allen_cahn_g(a, 2.0 * b, c)
                - allen_cahn_g(a, b, 2.0 * c)
        })
    }

    fn laplacian_dense(&self, u: &DenseTensor) -> DenseTensor {
        let mut acc = u.mode_product(&self.d2, 0);
        for m in 1..3 {
            acc.axpy(1.0, &u.mode_product(&self.d2, m));
        }
        acc
    }
}

impl EntrywiseRhs for AllenCahn3d {
    fn dims(&self) -> &[usize] {
        &self.spec.dims
    }

    fn eval_dense(&self, u: &DenseTensor, _t: f64) -> DenseTensor {
        let mut g = self.laplacian_dense(u);
        g.scale(self.alpha);
        for (gv, &uv) in g.values_mut().iter_mut().zip(u.values()) {
            *gv += uv - uv * uv * uv;
        }
        g
    }

    fn local(&self, idx: &[usize], fibers: &[&[f64]], _t: f64) -> f64 {
        let u = fibers[0][idx[0]];
        let lap: f64 = (0..3)
            .map(|m| {
                let n = self.spec.dims[m];
                (0..n).map(|x| self.d2[(idx[m], x)] * fibers[m][x]).sum::<f64>()
            })
            .sum();
        self.alpha * lap + u - u * u * u
    }
}

impl LowRankRhs for AllenCahn3d {
    fn eval_tt(&self, y: &TensorTrain, _t: f64, delta: f64) -> Result<TensorTrain> {
        let sq = round(&hadamard(y, y)?, delta);
        let cube = round(&hadamard(y, &sq)?, delta);
        let lap: Vec<TensorTrain> = (0..3).map(|m| y.mode_product(&self.d2, m)).collect();
        let terms = [
            (self.alpha, &lap[0]),
            (self.alpha, &lap[1]),
            (self.alpha, &lap[2]),
            (1.0, y),
            (-1.0, &cube),
        ];
        Ok(round(&linear_combination(&terms)?, delta))
    }
}

/// 4D advection-diffusion-reaction `u_t = div(mu u) + sigma Lap u + R(u)` on
/// `[0, 2pi]^4`, with `R(u) = -0.1 u / (1 + u^2)`.
#[derive(Clone)]
pub struct Adr4d {
    pub spec: ProblemSpec,
    pub sigma: f64,
    d1: Matrix,
    d2: Matrix,
    /// `mu[k]` sampled on the full grid.
    mu: Vec<DenseTensor>,
    grids: Vec<Vec<f64>>,
}

pub fn adr_g(x: f64, y: f64) -> f64 {
    (x.sin() * y.cos()).exp()
}

/// Drift component k at a grid point.
pub fn adr_mu(k: usize, x: &[f64]) -> f64 {
    0.5 * match k {
        0 => adr_g(x[1], x[2]),
        1 => adr_g(x[2], x[3]),
        2 => adr_g(x[3], x[0]),
        _ => adr_g(x[1], x[2]),
    }
}

impl Adr4d {
    pub fn new(n: usize) -> Result<Self> {
        let spec = ProblemSpec { name: "adr_4d".into(), dims: vec![n; 4], domain: vec![(0.0, 2.0 * PI); 4] };
        let d1 = fourier_diff(n, 2.0 * PI, 1)?;
        let d2 = fourier_diff(n, 2.0 * PI, 2)?;
        let mu = (0..4).map(|k| spec.sample(|x| adr_mu(k, x))).collect();
        let grids = (0..4).map(|m| spec.grid(m)).collect();
        Ok(Self { spec, sigma: 0.25, d1, d2, mu, grids })
    }

    pub fn initial_condition(&self) -> DenseTensor {
        self.spec.sample(|x| (x[0].sin() * x[1].sin() * x[2].sin() * x[3].sin()).exp())
    }

    /// Drift coefficient tensors `c_k = mu_k` sampled on the grid.
    pub fn coefficient_tensors(&self) -> &[DenseTensor] {
        &self.mu
    }

    /// Coefficient tensors compressed with TT-SVD at relative accuracy `delta`.
    pub fn coefficient_tts(&self, delta: f64) -> Result<Vec<TensorTrain>> {
        self.mu.iter().map(|c| tt_format::tt_svd(c, &Truncation::Tolerance(delta))).collect()
    }

    fn reaction(u: f64) -> f64 {
        -0.1 * u / (1.0 + u * u)
    }
}

impl EntrywiseRhs for Adr4d {
    fn dims(&self) -> &[usize] {
        &self.spec.dims
    }

    fn eval_dense(&self, u: &DenseTensor, _t: f64) -> DenseTensor {
        let mut g = u.map(Self::reaction);
        for k in 0..4 {
            let mut flux = u.clone();
            for (f, &m) in flux.values_mut().iter_mut().zip(self.mu[k].values()) {
                *f *= m;
            }
            g.axpy(1.0, &flux.mode_product(&self.d1, k));
            g.axpy(self.sigma, &u.mode_product(&self.d2, k));
        }
        g
    }

    fn local(&self, idx: &[usize], fibers: &[&[f64]], _t: f64) -> f64 {
        let u = fibers[0][idx[0]];
        let mut x: Vec<f64> = idx.iter().enumerate().map(|(m, &i)| self.grids[m][i]).collect();
        let mut g = Self::reaction(u);
        for k in 0..4 {
            let n = self.spec.dims[k];
            let own = x[k];
            let mut adv = 0.0;
            let mut dif = 0.0;
            for j in 0..n {
                x[k] = self.grids[k][j];
                adv += self.d1[(idx[k], j)] * adr_mu(k, &x) * fibers[k][j];
                dif += self.d2[(idx[k], j)] * fibers[k][j];
            }
            x[k] = own;
            g += adv + self.sigma * dif;
        }
        g
    }
}

/// ADR right-hand side in TT arithmetic: drift products with compressed
/// coefficient tensors, exact diffusion, and the reaction term through the
/// full tensor (there is no TT algorithm for the rational nonlinearity).
pub struct AdrLowRank {
    pub problem: Adr4d,
    pub coefficients: Vec<TensorTrain>,
}

impl AdrLowRank {
    pub fn new(problem: Adr4d, delta: f64) -> Result<Self> {
        let coefficients = problem.coefficient_tts(delta)?;
        Ok(Self { problem, coefficients })
    }
}

impl EntrywiseRhs for AdrLowRank {
    fn dims(&self) -> &[usize] {
        self.problem.dims()
    }

    fn eval_dense(&self, u: &DenseTensor, t: f64) -> DenseTensor {
        self.problem.eval_dense(u, t)
    }

    fn local(&self, idx: &[usize], fibers: &[&[f64]], t: f64) -> f64 {
        self.problem.local(idx, fibers, t)
    }
}

impl LowRankRhs for AdrLowRank {
    fn eval_tt(&self, y: &TensorTrain, _t: f64, delta: f64) -> Result<TensorTrain> {
        let p = &self.problem;
        let mut terms: Vec<TensorTrain> = Vec::new();
        for k in 0..4 {
            let flux = round(&hadamard(&self.coefficients[k], y)?, delta);
            terms.push(flux.mode_product(&p.d1, k));
            terms.push(y.mode_product(&p.d2, k).scaled(p.sigma));
        }
        let r = y.contract_to_dense()?.map(Adr4d::reaction);
        terms.push(tt_format::tt_svd(&r, &Truncation::Tolerance(delta))?);
        let refs: Vec<(f64, &TensorTrain)> = terms.iter().map(|t| (1.0, t)).collect();
        Ok(round(&linear_combination(&refs)?, delta))
    }
}

/// `G = 0`.
pub struct ZeroRhs {
    pub dims: Vec<usize>,
}

impl EntrywiseRhs for ZeroRhs {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn eval_dense(&self, u: &DenseTensor, _t: f64) -> DenseTensor {
        DenseTensor::zeros(u.shape().clone())
    }

    fn eval_block(&self, _y: &TensorTrain, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>], _t: f64) -> Block {
        TtCore::zeros(left.len(), self.dims[mode], right.len())
    }

    fn eval_entries(&self, _y: &TensorTrain, entries: &[Vec<usize>], _t: f64) -> Vec<f64> {
        vec![0.0; entries.len()]
    }
}

impl LowRankRhs for ZeroRhs {
    fn eval_tt(&self, y: &TensorTrain, _t: f64, _delta: f64) -> Result<TensorTrain> {
        let cores = y.cores().iter().map(|c| TtCore::zeros(1, c.n(), 1)).collect();
        TensorTrain::new(cores)
    }
}

/// Linear flow `G(X) = sum_m A_m x_m X` (mode products), which preserves
/// TT rank; the exact solution applies `exp(t A_m)` along every mode.
pub struct LinearModeFlow {
    pub dims: Vec<usize>,
    pub generators: Vec<Matrix>,
}

impl LinearModeFlow {
    pub fn exact(&self, y0: &TensorTrain, t: f64) -> TensorTrain {
        let mut y = y0.clone();
        for (m, a) in self.generators.iter().enumerate() {
            y = y.mode_product(&linalg::expm(&a.scaled(t)), m);
        }
        y
    }
}

impl EntrywiseRhs for LinearModeFlow {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn eval_dense(&self, u: &DenseTensor, _t: f64) -> DenseTensor {
        let mut g = DenseTensor::zeros(u.shape().clone());
        for (m, a) in self.generators.iter().enumerate() {
            g.axpy(1.0, &u.mode_product(a, m));
        }
        g
    }

    fn local(&self, idx: &[usize], fibers: &[&[f64]], _t: f64) -> f64 {
        self.generators.iter().enumerate().map(|(m, a)| dot(&a.row(idx[m]), fibers[m])).sum()
    }
}

impl LowRankRhs for LinearModeFlow {
    fn eval_tt(&self, y: &TensorTrain, _t: f64, delta: f64) -> Result<TensorTrain> {
        let terms: Vec<TensorTrain> =
            self.generators.iter().enumerate().map(|(m, a)| y.mode_product(a, m)).collect();
        let refs: Vec<(f64, &TensorTrain)> = terms.iter().map(|t| (1.0, t)).collect();
        Ok(round(&linear_combination(&refs)?, delta))
    }
}

/// Nonlinear rank-preserving flow `G(X) = c(X) sum_m A_m x_m X` with
/// `c(X) = 1 / (1 + ||X||^2)`. Splitting substeps do not commute for it,
/// unlike the purely linear flow.
pub struct NormScaledFlow {
    pub linear: LinearModeFlow,
}

impl NormScaledFlow {
    fn factor(norm: f64) -> f64 {
        1.0 / (1.0 + norm * norm)
    }
}

impl EntrywiseRhs for NormScaledFlow {
    fn dims(&self) -> &[usize] {
        &self.linear.dims
    }

    fn eval_dense(&self, u: &DenseTensor, t: f64) -> DenseTensor {
        let mut g = self.linear.eval_dense(u, t);
        g.scale(Self::factor(u.frobenius_norm()));
        g
    }

    fn eval_block(&self, y: &TensorTrain, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>], t: f64) -> Block {
        let mut b = self.linear.eval_block(y, left, mode, right, t);
        b.scale(Self::factor(y.frobenius_norm()));
        b
    }

    fn eval_entries(&self, y: &TensorTrain, entries: &[Vec<usize>], t: f64) -> Vec<f64> {
        let c = Self::factor(y.frobenius_norm());
        self.linear.eval_entries(y, entries, t).into_iter().map(|v| c * v).collect()
    }
}

impl LowRankRhs for NormScaledFlow {
    fn eval_tt(&self, y: &TensorTrain, t: f64, delta: f64) -> Result<TensorTrain> {
        Ok(self.linear.eval_tt(y, t, delta)?.scaled(Self::factor(y.frobenius_norm())))
    }
}

/// Manufactured low-rank path `A(t)` whose core `mode` is
/// `C0 + sin(omega t) C1 + (1 - cos(omega t)) C2`; `G(X, t) = dA/dt`
/// regardless of `X`.
pub struct ManufacturedPath {
    pub base: TensorTrain,
    pub mode: usize,
    pub c1: TtCore,
    pub c2: TtCore,
    pub omega: f64,
    dims: Vec<usize>,
}

impl ManufacturedPath {
    pub fn new(base: TensorTrain, mode: usize, c1: TtCore, c2: TtCore, omega: f64) -> Self {
        let dims = base.dims();
        Self { base, mode, c1, c2, omega, dims }
    }

    pub fn at(&self, t: f64) -> TensorTrain {
        let mut y = self.base.clone();
        let c = y.core_mut(self.mode);
        c.axpy((self.omega * t).sin(), &self.c1);
        c.axpy(1.0 - (self.omega * t).cos(), &self.c2);
        y
    }

    pub fn derivative(&self, t: f64) -> TensorTrain {
        let mut y = self.base.clone();
        let mut c = self.c1.clone();
        c.scale(self.omega * (self.omega * t).cos());
        c.axpy(self.omega * (self.omega * t).sin(), &self.c2);
        *y.core_mut(self.mode) = c;
        y
    }
}

impl EntrywiseRhs for ManufacturedPath {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn eval_dense(&self, u: &DenseTensor, t: f64) -> DenseTensor {
        let _ = u;
        self.derivative(t).contract_to_dense().expect("small manufactured tensor")
    }

    fn eval_block(&self, _y: &TensorTrain, left: &[Vec<usize>], mode: usize, right: &[Vec<usize>], t: f64) -> Block {
        self.derivative(t).subtensor_unchecked(left, mode, right)
    }

    fn eval_entries(&self, _y: &TensorTrain, entries: &[Vec<usize>], t: f64) -> Vec<f64> {
        let g = self.derivative(t);
        entries.iter().map(|e| g.entry(e)).collect()
    }
}

impl LowRankRhs for ManufacturedPath {
    fn eval_tt(&self, _y: &TensorTrain, t: f64, _delta: f64) -> Result<TensorTrain> {
        Ok(self.derivative(t))
    }
}

/// One classical RK4 step on dense tensors.
pub fn rk4_dense(rhs: &dyn EntrywiseRhs, u: &DenseTensor, t: f64, dt: f64) -> DenseTensor {
    let k1 = rhs.eval_dense(u, t);
    let mut s = u.clone();
    s.axpy(dt / 2.0, &k1);
    let k2 = rhs.eval_dense(&s, t + dt / 2.0);
    let mut s = u.clone();
    s.axpy(dt / 2.0, &k2);
    let k3 = rhs.eval_dense(&s, t + dt / 2.0);
    let mut s = u.clone();
    s.axpy(dt, &k3);
    let k4 = rhs.eval_dense(&s, t + dt);
    let mut out = u.clone();
    out.axpy(dt / 6.0, &k1);
    out.axpy(dt / 3.0, &k2);
    out.axpy(dt / 3.0, &k3);
    out.axpy(dt / 6.0, &k4);
    out
}

/// Number of steps of size `dt` to reach `t` (times are snapped to the step grid).
pub fn steps_to(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

/// Dense RK4 trajectory snapshots at `sample_times` (snapped to multiples of `dt`).
pub fn dense_reference(
    rhs: &dyn EntrywiseRhs,
    u0: &DenseTensor,
    dt: f64,
    t_end: f64,
    sample_times: &[f64],
) -> Result<Vec<(f64, DenseTensor)>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let total = steps_to(t_end, dt);
    let mut wanted: Vec<usize> = sample_times.iter().map(|&t| steps_to(t, dt)).filter(|&s| s <= total).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let limit = 1e6 * u0.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(wanted.len());
    let mut u = u0.clone();
    let mut next = 0;
    for step in 0..=total {
        while next < wanted.len() && wanted[next] == step {
            out.push((step as f64 * dt, u.clone()));
            next += 1;
        }
        if step == total {
            break;
        }
        u = rk4_dense(rhs, &u, step as f64 * dt, dt);
        let norm = u.frobenius_norm();
        if !(norm <= limit) {
            return Err(Error::BlowUp { t: (step + 1) as f64 * dt, norm, limit });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_sine() {
        let n = 32;
        let l = 3.0;
        let x = periodic_grid(0.0, l, n);
        let w = 2.0 * PI / l;
        let f = Matrix::from_fn(n, 1, |i, _| (w * x[i]).sin());
        let d1 = fourier_diff(n, l, 1).unwrap();
        let df = linalg::matmul(&d1, &f);
        for i in 0..n {
            assert!((df[(i, 0)] - w * (w * x[i]).cos()).abs() < 1e-10);
        }
        let d2 = fourier_diff(n, l, 2).unwrap();
        let ddf = linalg::matmul(&d2, &f);
        for i in 0..n {
            assert!((ddf[(i, 0)] + w * w * f[(i, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn constants_in_kernel_and_symmetry() {
        let d1 = fourier_diff(16, 2.0 * PI, 1).unwrap();
        let d2 = fourier_diff(16, 2.0 * PI, 2).unwrap();
        let ones = Matrix::from_fn(16, 1, |_, _| 1.0);
        assert!(linalg::matmul(&d1, &ones).max_abs() < 1e-12);
        assert!(linalg::matmul(&d2, &ones).max_abs() < 1e-12);
        assert!(d1.add(&d1.transpose()).max_abs() < 1e-14);
        assert!(d2.sub(&d2.transpose()).max_abs() < 1e-12);
        assert!(fourier_diff(15, 1.0, 1).is_err());
    }

    #[test]
    fn allen_cahn_fixed_points() {
        let p = AllenCahn3d::new(8).unwrap();
        for c in [0.0, 1.0] {
            let u = DenseTensor::from_fn(p.spec.shape(), |_| c);
            assert!(p.eval_dense(&u, 0.0).values().iter().all(|g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn initial_conditions_are_finite() {
        assert!(AllenCahn3d::new(16).unwrap().initial_condition().is_finite());
        assert!(VlasovPoisson2d::new(16).unwrap().initial_condition().is_finite());
        assert!(Adr4d::new(8).unwrap().initial_condition().is_finite());
    }

    fn check_blocks(rhs: &dyn EntrywiseRhs, seed: u64) {
        use rand::SeedableRng;
        let dims = rhs.dims().to_vec();
        let d = dims.len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ranks = vec![1; d + 1];
        for r in ranks.iter_mut().take(d).skip(1) {
            *r = 3;
        }
        let y = TensorTrain::random(&dims, &ranks, &mut rng).unwrap();
        let g = rhs.eval_dense(&y.contract_to_dense().unwrap(), 0.0);
        for mode in 0..d {
            let left: Vec<Vec<usize>> = (0..2).map(|a| (0..mode).map(|m| (a + 2 * m + 1) % dims[m]).collect()).collect();
            let right: Vec<Vec<usize>> =
                (0..3).map(|b| (mode + 1..d).map(|m| (3 * b + m) % dims[m]).collect()).collect();
            let block = rhs.eval_block(&y, &left, mode, &right, 0.0);
            let mut entries = Vec::new();
            for (a, l) in left.iter().enumerate() {
                for i in 0..dims[mode] {
                    for (b, r) in right.iter().enumerate() {
                        let mut idx = l.clone();
                        idx.push(i);
                        idx.extend_from_slice(r);
                        let want = g.get(&idx).unwrap();
                        assert!((block.get(a, i, b) - want).abs() < 1e-9 * (1.0 + want.abs()), "mode {mode}");
                        entries.push(idx);
                    }
                }
            }
            let vals = rhs.eval_entries(&y, &entries, 0.0);
            for (e, v) in entries.iter().zip(vals) {
                assert!((v - g.get(e).unwrap()).abs() < 1e-9 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn block_evaluation_matches_dense() {
        check_blocks(&VlasovPoisson2d::new(8).unwrap(), 1);
        check_blocks(&AllenCahn3d::new(6).unwrap(), 2);
        check_blocks(&Adr4d::new(4).unwrap(), 3);
    }

    #[test]
    fn low_rank_rhs_matches_dense() {
        let p = AllenCahn3d::new(8).unwrap();
        let u0 = p.initial_condition();
        let y = tt_format::tt_svd(&u0, &Truncation::Tolerance(1e-12)).unwrap();
        let g = p.eval_tt(&y, 0.0, 1e-12).unwrap().contract_to_dense().unwrap();
        assert!(crate::tensor_core::relative_error(&g, &p.eval_dense(&u0, 0.0)).unwrap() < 1e-9);
        let v = VlasovPoisson2d::new(16).unwrap();
        let u0 = v.initial_condition();
        let y = tt_format::tt_svd(&u0, &Truncation::Tolerance(1e-13)).unwrap();
        let g = v.eval_tt(&y, 0.0, 1e-13).unwrap().contract_to_dense().unwrap();
        assert!(crate::tensor_core::relative_error(&g, &v.eval_dense(&u0, 0.0)).unwrap() < 1e-9);
        let a = Adr4d::new(6).unwrap();
        let u0 = a.initial_condition();
        let y = tt_format::tt_svd(&u0, &Truncation::Tolerance(1e-13)).unwrap();
        let g = AdrLowRank::new(a.clone(), 1e-13).unwrap().eval_tt(&y, 0.0, 1e-13).unwrap().contract_to_dense().unwrap();
        assert!(crate::tensor_core::relative_error(&g, &a.eval_dense(&u0, 0.0)).unwrap() < 1e-8);
    }

    #[test]
    fn linear_decay_reference() {
        let flow = LinearModeFlow { dims: vec![3], generators: vec![Matrix::identity(3).scaled(-1.0)] };
        let u0 = DenseTensor::from_fn(Shape::new(vec![3]).unwrap(), |i| 1.0 + i[0] as f64);
        let snaps = dense_reference(&flow, &u0, 1e-2, 1.0, &[1.0]).unwrap();
        let mut want = u0.clone();
        want.scale((-1.0f64).exp());
        assert!(crate::tensor_core::relative_error(&snaps[0].1, &want).unwrap() < 1e-9);
    }
}
