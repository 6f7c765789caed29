//! Dense kernels (products, QR, SVD, solves) on [`Matrix`], backed by faer.

use faer::linalg::solvers::{Solve, Svd as FaerSvd};
use faer::{Accum, Mat, MatRef, Par};

use crate::error::{Error, Result};
use crate::tensor_core::Matrix;

fn view(m: &Matrix) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.data(), m.rows(), m.cols())
}

fn to_matrix(m: MatRef<'_, f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn owned(m: Mat<f64>) -> Matrix {
    to_matrix(m.as_ref())
}

/// Sets the number of threads used inside dense kernels (1 = sequential).
pub fn set_threads(k: usize) {
    let par = match std::num::NonZeroUsize::new(k) {
        Some(n) if n.get() > 1 => Par::Rayon(n),
        _ => Par::Seq,
    };
    faer::set_global_parallelism(par);
}

fn par() -> Par {
    faer::get_global_parallelism()
}

fn gemm(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Matrix {
    let (m, n) = (a.nrows(), b.ncols());
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return out;
    }
    if a.ncols() == 0 {
        return out;
    }
    let dst = faer::MatMut::from_column_major_slice_mut(out.data_mut(), m, n);
    faer::linalg::matmul::matmul(dst, Accum::Replace, a, b, 1.0, par());
    out
}

/// `a * b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    gemm(view(a), view(b))
}

/// `a^T * b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    gemm(view(a).transpose(), view(b))
}

/// `a * b^T`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    gemm(view(a), view(b).transpose())
}

/// Thin QR `a = q r` with `q` of size m x min(m,n) and a nonnegative diagonal in `r`.
pub fn qr_thin(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = (a.rows(), a.cols());
    let k = m.min(n);
    if k == 0 {
        return (Matrix::zeros(m, 0), Matrix::zeros(0, n));
    }
    let qr = view(a).qr();
    let mut q = owned(qr.compute_thin_Q());
    let rr = qr.thin_R();
    let mut r = Matrix::from_fn(k, n, |i, j| if j >= i { rr[(i, j)] } else { 0.0 });
    for i in 0..k {
        if r[(i, i)] < 0.0 {
            for j in 0..n {
                r[(i, j)] = -r[(i, j)];
            }
            for x in q.col_mut(i) {
                *x = -*x;
            }
        }
    }
    (q, r)
}

/// Thin LQ `a = l q` with `q` having orthonormal rows.
pub fn lq_thin(a: &Matrix) -> (Matrix, Matrix) {
    let (q, r) = qr_thin(&a.transpose());
    (r.transpose(), q.transpose())
}

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

/// Thin SVD `a = u diag(s) v^T`, singular values nonincreasing.
pub fn svd_thin(a: &Matrix) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd { u: Matrix::zeros(m, 0), s: vec![], v: Matrix::zeros(n, 0) });
    }
    // faer is faster on tall inputs; transpose wide ones.
    if m < n {
        let t = svd_thin(&a.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let svd = FaerSvd::new_thin(view(a)).map_err(|e| Error::Linalg(format!("svd: {e:?}")))?;
    let s: Vec<f64> = (0..k).map(|i| svd.S()[i]).collect();
    let mut u = to_matrix(svd.U());
    let mut v = to_matrix(svd.V());
    // sign convention: largest-magnitude entry of each left vector positive
    for j in 0..k {
        let col = u.col(j);
        let mut best = 0;
        for i in 1..m {
            if col[i].abs() > col[best].abs() + 1e-14 {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.col_mut(j).iter_mut().for_each(|x| *x = -*x);
            v.col_mut(j).iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(Svd { u, s, v })
}

pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if a.rows().min(a.cols()) == 0 {
        return Ok(vec![]);
    }
    view(a).singular_values().map_err(|e| Error::Linalg(format!("svd: {e:?}")))
}

/// 2-norm condition number; infinite for singular or empty input.
pub fn cond2(a: &Matrix) -> f64 {
    match singular_values(a) {
        Ok(s) if !s.is_empty() => {
            let smin = *s.last().unwrap();
            if smin > 0.0 {
                s[0] / smin
            } else {
                f64::INFINITY
            }
        }
        _ => f64::INFINITY,
    }
}

/// Factorized square matrix for repeated solves.
pub struct Lu {
    lu: faer::linalg::solvers::PartialPivLu<f64>,
    n: usize,
}

impl Lu {
    pub fn new(a: &Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::DimensionMismatch(format!(
                "LU of a {}x{} matrix",
                a.rows(),
                a.cols()
            )));
        }
        let lu = view(a).partial_piv_lu();
        let n = a.rows();
        // singular pivots show up as zero or non-finite entries of U
        let u = lu.U();
        for i in 0..n {
            let p = u[(i, i)];
            if p == 0.0 || !p.is_finite() {
                return Err(Error::Singular(format!("zero pivot at {i}")));
            }
        }
        Ok(Self { lu, n })
    }

    /// `a^{-1} b`
    pub fn solve(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.n);
        if b.cols() == 0 {
            return b.clone();
        }
        owned(self.lu.solve(view(b)))
    }

    /// `a^{-T} b`
    pub fn solve_transpose(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.n);
        if b.cols() == 0 {
            return b.clone();
        }
        owned(self.lu.solve_transpose(view(b)))
    }

    /// `b a^{-1}`
    pub fn solve_right(&self, b: &Matrix) -> Matrix {
        self.solve_transpose(&b.transpose()).transpose()
    }

    /// `b a^{-T}`
    pub fn solve_right_transpose(&self, b: &Matrix) -> Matrix {
        self.solve(&b.transpose()).transpose()
    }
}

pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(Lu::new(a)?.solve(b))
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    solve(a, &Matrix::identity(a.rows()))
}

pub fn determinant(a: &Matrix) -> f64 {
    if a.rows() == 0 {
        return 1.0;
    }
    view(a).determinant()
}

/// Orthonormal basis for the orthogonal complement of the columns of an
/// orthonormal `q` (m x k), of size m x (m - k).
pub fn complement_basis(q: &Matrix) -> Matrix {
    let m = q.rows();
    let mut basis: Vec<Vec<f64>> = (0..q.cols()).map(|j| q.col(j).to_vec()).collect();
    let mut out = Vec::new();
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nrm = crate::tensor_core::norm2(&v);
        if nrm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nrm);
            basis.push(v.clone());
            out.push(v);
        }
        if basis.len() == m {
            break;
        }
    }
    let cols = out.len();
    Matrix::from_vec(m, cols, out.concat()).expect("complement size")
}

/// Matrix exponential by scaling and squaring with a Taylor series.
pub fn expm(a: &Matrix) -> Matrix {
    let n = a.rows();
    let norm = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.5 {
        s += 1;
    }
    let b = a.scaled(1.0 / f64::powi(2.0, s));
    let mut term = Matrix::identity(n);
    let mut sum = Matrix::identity(n);
    for k in 1..=20 {
        term = matmul(&term, &b);
        term.scale(1.0 / k as f64);
        sum.axpy(1.0, &term);
    }
    for _ in 0..s {
        sum = matmul(&sum, &sum);
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(m: usize, n: usize) -> Matrix {
        Matrix::from_fn(m, n, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * (i as f64 * j as f64).sin())
    }

    #[test]
    fn products_agree_with_loops() {
        let a = sample(5, 3);
        let b = sample(3, 4);
        let c = matmul(&a, &b);
        for i in 0..5 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((c[(i, j)] - s).abs() < 1e-12);
            }
        }
        let ct = matmul_tn(&a.transpose(), &b);
        assert!(ct.sub(&c).max_abs() < 1e-12);
        let cn = matmul_nt(&a, &b.transpose());
        assert!(cn.sub(&c).max_abs() < 1e-12);
    }

    #[test]
    fn qr_reconstructs_with_nonnegative_diagonal() {
        for (m, n) in [(7, 3), (3, 7), (4, 4)] {
            let a = sample(m, n);
            let (q, r) = qr_thin(&a);
            assert!(matmul(&q, &r).sub(&a).max_abs() < 1e-12);
            let qtq = matmul_tn(&q, &q);
            assert!(qtq.sub(&Matrix::identity(q.cols())).max_abs() < 1e-13);
            for i in 0..r.rows() {
                assert!(r[(i, i)] >= 0.0);
            }
        }
    }

    #[test]
    fn lq_reconstructs() {
        let a = sample(3, 8);
        let (l, q) = lq_thin(&a);
        assert!(matmul(&l, &q).sub(&a).max_abs() < 1e-12);
        assert!(matmul_nt(&q, &q).sub(&Matrix::identity(3)).max_abs() < 1e-13);
    }

    #[test]
    fn svd_reconstructs() {
        for (m, n) in [(9, 4), (4, 9)] {
            let a = sample(m, n);
            let s = svd_thin(&a).unwrap();
            let mut us = s.u.clone();
            for j in 0..s.s.len() {
                us.col_mut(j).iter_mut().for_each(|x| *x *= s.s[j]);
            }
            assert!(matmul_nt(&us, &s.v).sub(&a).max_abs() < 1e-11);
            assert!(s.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn solves() {
        let a = Matrix::from_rows(&[&[4.0, 1.0], &[2.0, 3.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[2.0]]);
        let lu = Lu::new(&a).unwrap();
        let x = lu.solve(&b);
        assert!(matmul(&a, &x).sub(&b).max_abs() < 1e-14);
        let y = lu.solve_transpose(&b);
        assert!(matmul_tn(&a, &y).sub(&b).max_abs() < 1e-14);
        let z = lu.solve_right(&b.transpose());
        assert!(matmul(&z, &a).sub(&b.transpose()).max_abs() < 1e-14);
        assert!((determinant(&a) - 10.0).abs() < 1e-13);
        assert!(Lu::new(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn expm_of_rotation_generator() {
        let a = Matrix::from_rows(&[&[0.0, -1.5], &[1.5, 0.0]]);
        let e = expm(&a);
        assert!((e[(0, 0)] - 1.5f64.cos()).abs() < 1e-14);
        assert!((e[(1, 0)] - 1.5f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn complement_is_orthonormal() {
        let (q, _) = qr_thin(&sample(6, 2));
        let c = complement_basis(&q);
        assert_eq!(c.cols(), 4);
        assert!(matmul_tn(&q, &c).max_abs() < 1e-13);
        assert!(matmul_tn(&c, &c).sub(&Matrix::identity(4)).max_abs() < 1e-13);
    }
}
