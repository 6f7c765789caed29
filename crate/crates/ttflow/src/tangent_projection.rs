//! Orthogonal and interpolatory projections onto the tangent space of the
//! fixed-rank TT manifold.
//!
//! Tangent vectors are stored as core variations `dC_m` in the gauge of the
//! base point: the dense tensor is `sum_m U_{<m} dC_m V_{>m}` with
//! left-orthogonal `U` and right-orthogonal `V`, and `U_m^T dC_m = 0` for
//! `m < d-1` in the orthogonal case.

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::sampling::{tt_cross_deim, CrossDeim, NestedIndexSets};
use crate::tensor_core::{DenseTensor, Matrix};
use crate::tt_format::{
    left_partial_dense, orthogonalize_all, right_partial_dense, sample_block, sample_pivot, EntryOracle,
    OrthFamily, TensorTrain, TtCore,
};

/// Frames whose interface matrices exceed this condition number are rejected.
pub const MAX_INTERFACE_COND: f64 = 1e12;

/// Base point data for tangent projections.
pub struct TangentFrame {
    pub family: OrthFamily,
    pub cross: Option<CrossDeim>,
    m_lu: Vec<Lu>,
    n_lu: Vec<Lu>,
    pub cond_m: Vec<f64>,
    pub cond_n: Vec<f64>,
}

impl TangentFrame {
    /// Frame for orthogonal projection only.
    pub fn orthogonal(y: &TensorTrain) -> Result<Self> {
        let family = orthogonalize_all(y)?;
        Ok(Self { family, cross: None, m_lu: vec![], n_lu: vec![], cond_m: vec![], cond_n: vec![] })
    }

    /// Frame with TT-cross-DEIM index sets and factorized interface matrices.
    pub fn interpolatory(y: &TensorTrain) -> Result<Self> {
        let family = orthogonalize_all(y)?;
        let cross = tt_cross_deim(&family, &[])?;
        Self::with_cross(family, cross)
    }

    pub fn with_cross(family: OrthFamily, cross: CrossDeim) -> Result<Self> {
        let cond_m = cross.cond_m();
        let cond_n = cross.cond_n();
        for (k, (&cm, &cn)) in cond_m.iter().zip(&cond_n).enumerate() {
            let c = cm.max(cn);
            if !(c <= MAX_INTERFACE_COND) {
                return Err(Error::IllConditioned { level: k + 1, cond: c, limit: MAX_INTERFACE_COND });
            }
        }
        let m_lu = cross
            .m
            .iter()
            .enumerate()
            .map(|(k, m)| Lu::new(m).map_err(|_| Error::SingularInterface { level: k + 1, cond: cond_m[k] }))
            .collect::<Result<Vec<_>>>()?;
        let n_lu = cross
            .n
            .iter()
            .enumerate()
            .map(|(k, n)| Lu::new(n).map_err(|_| Error::SingularInterface { level: k + 1, cond: cond_n[k] }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { family, cross: Some(cross), m_lu, n_lu, cond_m, cond_n })
    }

    pub fn ndim(&self) -> usize {
        self.family.ndim()
    }

    pub fn sets(&self) -> Option<&NestedIndexSets> {
        self.cross.as_ref().map(|c| &c.sets)
    }

    /// Left-orthogonal core for mode m (`m < d-1`).
    fn u(&self, m: usize) -> &TtCore {
        self.family.u(m)
    }

    fn v(&self, m: usize) -> &TtCore {
        self.family.v(m)
    }

    /// `M_{m}^{-1} B N_{m+1}^{-T}` applied to a sampled block at mode m.
    fn solve_block(&self, block: &TtCore, m: usize) -> TtCore {
        let d = self.ndim();
        let mut c = block.clone();
        if m > 0 {
            let r = self.m_lu[m - 1].solve(&c.right_unfolding());
            c = TtCore::from_right_unfolding(r, c.n(), c.r_right()).expect("solve");
        }
        if m < d - 1 {
            let l = self.n_lu[m].solve_right_transpose(&c.left_unfolding());
            c = TtCore::from_left_unfolding(l, c.r_left(), c.n()).expect("solve");
        }
        c
    }

    /// `M_k^{-1} P N_k^{-T}` for a pivot block at level k.
    fn solve_pivot(&self, p: &Matrix, k: usize) -> Matrix {
        let a = self.m_lu[k - 1].solve(p);
        self.n_lu[k - 1].solve_right_transpose(&a)
    }

    /// Number of entries requested by an interpolatory projection.
    pub fn entry_budget(&self) -> usize {
        let sets = match self.sets() {
            Some(s) => s,
            None => return 0,
        };
        let d = self.ndim();
        let dims: Vec<usize> = (0..d).map(|m| self.core_dim(m)).collect();
        let blocks: usize = (0..d).map(|m| sets.left[m].len() * dims[m] * sets.right[m + 1].len()).sum();
        let pivots: usize = (1..d).map(|k| sets.left[k].len() * sets.right[k].len()).sum();
        blocks + pivots
    }

    fn core_dim(&self, m: usize) -> usize {
        if m == 0 {
            self.family.first.n()
        } else {
            self.v(m).n()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TangentVector {
    pub dc: Vec<TtCore>,
}

/// Interpolatory projection of a tensor given entry-wise. Only the blocks
/// `Z(I^{<=m}, :, I^{>m+1})` and pivots `Z(I^{<=k}, I^{>k})` are requested.
pub fn interpolatory_project(frame: &TangentFrame, z: &EntryOracle<'_>) -> Result<TangentVector> {
    let sets = frame
        .sets()
        .ok_or_else(|| Error::Config("interpolatory projection needs an indexed frame".into()))?;
    let d = frame.ndim();
    let dims: Vec<usize> = (0..d).map(|m| frame.core_dim(m)).collect();
    let mut dc = Vec::with_capacity(d);
    for m in 0..d {
        let block = sample_block(z, &dims, &sets.left[m], m, &sets.right[m + 1]);
        let mut c = frame.solve_block(&block, m);
        if m < d - 1 {
            let k = m + 1;
            let pivot = sample_pivot(z, d, &sets.left[k], &sets.right[k]);
            let ds = frame.solve_pivot(&pivot, k);
            let u = frame.u(m);
            let correction = linalg::matmul(&u.left_unfolding(), &ds);
            let mut lu = c.left_unfolding();
            lu.axpy(-1.0, &correction);
            c = TtCore::from_left_unfolding(lu, c.r_left(), c.n())?;
        }
        dc.push(c);
    }
    Ok(TangentVector { dc })
}

/// Interpolatory projection of a dense tensor.
pub fn interpolatory_project_dense(frame: &TangentFrame, z: &DenseTensor) -> Result<TangentVector> {
    interpolatory_project(frame, &|idx: &[usize]| z.at(idx))
}

/// Orthogonal projection of a dense tensor (the Frobenius-optimal tangent vector).
pub fn orthogonal_project(frame: &TangentFrame, z: &DenseTensor) -> Result<TangentVector> {
    let d = frame.ndim();
    let dims = z.dims().to_vec();
    let fam = &frame.family;
    if dims.len() != d || (0..d).any(|m| frame.core_dim(m) != dims[m]) {
        return Err(Error::DimensionMismatch(format!("tensor {dims:?} for frame of order {d}")));
    }
    let mut dc = Vec::with_capacity(d);
    for m in 0..d {
        let c = project_core(z, &fam.left[..m], &fam.right[m..], m);
        let c = if m < d - 1 {
            let u = fam.u(m).left_unfolding();
            let cu = c.left_unfolding();
            let mut proj = cu.clone();
            proj.axpy(-1.0, &linalg::matmul(&u, &linalg::matmul_tn(&u, &cu)));
            TtCore::from_left_unfolding(proj, c.r_left(), c.n())?
        } else {
            c
        };
        dc.push(c);
    }
    Ok(TangentVector { dc })
}

/// `(I (x) U_{<m})^T Z^<m+1> V_{>m}` as an r_m x n_m x r_{m+1} core, where
/// `left` are the cores of modes `0..m` and `right` those of modes `m+1..d`.
pub fn project_core(z: &DenseTensor, left: &[TtCore], right: &[TtCore], m: usize) -> TtCore {
    let dims = z.dims();
    let nl: usize = dims[..m].iter().product();
    let n = dims[m];
    let nr: usize = dims[m + 1..].iter().product();
    let p = left_partial_dense(left);
    let q = right_partial_dense(right);
    let x = Matrix::from_vec(nl, n * nr, z.values().to_vec()).expect("unfolding");
    let t = linalg::matmul_tn(&p, &x);
    let rl = p.cols();
    let t = t.reshape(rl * n, nr).expect("reshape");
    let c = linalg::matmul(&t, &q);
    TtCore::from_left_unfolding(c, rl, n).expect("projected core")
}

impl TangentVector {
    /// Dense tensor `sum_m U_{<m} dC_m V_{>m}`.
    pub fn realize_dense(&self, frame: &TangentFrame) -> Result<DenseTensor> {
        let d = frame.ndim();
        let fam = &frame.family;
        let mut acc: Option<DenseTensor> = None;
        for m in 0..d {
            let mut cores: Vec<TtCore> = fam.left[..m].to_vec();
            cores.push(self.dc[m].clone());
            cores.extend(fam.right[m..].iter().cloned());
            let t = TensorTrain::new(cores)?.contract_to_dense()?;
            match acc.as_mut() {
                None => acc = Some(t),
                Some(a) => a.axpy(1.0, &t),
            }
        }
        Ok(acc.expect("at least one core"))
    }

    pub fn zeros_like(frame: &TangentFrame) -> TangentVector {
        let tt = frame.family.left_orthogonal_tt();
        TangentVector {
            dc: tt.cores().iter().map(|c| TtCore::zeros(c.r_left(), c.n(), c.r_right())).collect(),
        }
    }
}

/// Matrix-case interpolatory projector
/// `Z(:,J) V(J,:)^{-T} V^T - U U(I,:)^{-1} Z(I,J) V(J,:)^{-T} V^T + U U(I,:)^{-1} Z(I,:)`.
pub fn matrix_projectors(u: &Matrix, v: &Matrix, i: &[usize], j: &[usize], z: &Matrix) -> Result<Matrix> {
    let ui = Lu::new(&u.select_rows(i)).map_err(|_| Error::Singular("U(I,:)".into()))?;
    let vj = Lu::new(&v.select_rows(j)).map_err(|_| Error::Singular("V(J,:)".into()))?;
    let zj = z.select_cols(j);
    let zi = z.select_rows(i);
    let zij = zi.select_cols(j);
    // Z(:,J) V(J,:)^{-T} V^T
    let t1 = linalg::matmul_nt(&vj.solve_right_transpose(&zj), v);
    // U U(I,:)^{-1} Z(I,J) V(J,:)^{-T} V^T
    let core = vj.solve_right_transpose(&ui.solve(&zij));
    let t2 = linalg::matmul_nt(&linalg::matmul(u, &core), v);
    // U U(I,:)^{-1} Z(I,:)
    let t3 = linalg::matmul(u, &ui.solve(&zi));
    Ok(t1.sub(&t2).add(&t3))
}

/// Matrix-case orthogonal projector `U U^T Z + Z V V^T - U U^T Z V V^T`.
pub fn matrix_orthogonal_projector(u: &Matrix, v: &Matrix, z: &Matrix) -> Matrix {
    let uuz = linalg::matmul(u, &linalg::matmul_tn(u, z));
    let zvv = linalg::matmul_nt(&linalg::matmul(z, v), v);
    let uuzvv = linalg::matmul_nt(&linalg::matmul(&uuz, v), v);
    uuz.add(&zvv).sub(&uuzvv)
}
