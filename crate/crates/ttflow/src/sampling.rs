//! Greedy index selection: DEIM, an oversampled extension used for rank
//! increase, and the TT-cross-DEIM sweeps producing nested multi-index sets.

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::tensor_core::Matrix;
use crate::tt_format::{OrthFamily, TtCore};

/// Index of the largest |x|; ties go to the lowest index.
fn argmax_abs(x: &[f64], skip: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in x.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        let a = v.abs();
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((i, a)),
        }
    }
    best.map(|(i, _)| i)
}

/// DEIM row selection for an n x r basis.
pub fn deim(v: &Matrix) -> Result<Vec<usize>> {
    let (n, r) = (v.rows(), v.cols());
    if r == 0 || n < r {
        return Err(Error::Deim { level: 0, reason: format!("{n}x{r} basis") });
    }
    let first = v.col(0);
    let mut l = vec![argmax_abs(first, &[]).unwrap()];
    if first[l[0]].abs() == 0.0 || !first[l[0]].is_finite() {
        return Err(Error::Deim { level: 0, reason: "zero or non-finite first column".into() });
    }
    for j in 1..r {
        let vj = v.col(j);
        let basis = v.leading_cols(j);
        let lu = Lu::new(&basis.select_rows(&l)).map_err(|_| Error::Deim {
            level: 0,
            reason: format!("singular selected block at column {j}"),
        })?;
        let rhs = Matrix::from_vec(j, 1, l.iter().map(|&i| vj[i]).collect()).unwrap();
        let c = lu.solve(&rhs);
        let fit = linalg::matmul(&basis, &c);
        let res: Vec<f64> = vj.iter().zip(fit.data()).map(|(a, b)| a - b).collect();
        let p = argmax_abs(&res, &[]).unwrap();
        let scale = crate::tensor_core::norm2(vj).max(f64::MIN_POSITIVE);
        if !res[p].is_finite() || res[p].abs() <= 1e-15 * scale {
            return Err(Error::Deim { level: 0, reason: format!("rank deficient at column {j}") });
        }
        l.push(p);
    }
    Ok(l)
}

/// DEIM positions extended to `m >= r` rows. Each extra row maximizes its
/// alignment with the weakest right singular direction of the current
/// selection, `(v_i . z_min)^2`, which greedily raises the smallest
/// singular value of `V(l, :)`.
pub fn deim_oversampled(v: &Matrix, m: usize) -> Result<Vec<usize>> {
    let (n, r) = (v.rows(), v.cols());
    if m > n {
        return Err(Error::Deim { level: 0, reason: format!("{m} rows requested from {n}") });
    }
    if m < r {
        return Err(Error::Deim { level: 0, reason: format!("{m} rows for a rank-{r} basis") });
    }
    let mut l = deim(v)?;
    while l.len() < m {
        let svd = linalg::svd_thin(&v.select_rows(&l))?;
        let z: Vec<f64> = svd.v.col(r - 1).to_vec();
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = (0..r).map(|a| v[(i, a)] * z[a]).sum();
                s * s
            })
            .collect();
        match argmax_abs(&scores, &l) {
            Some(p) => l.push(p),
            None => break,
        }
    }
    Ok(l)
}

/// `l = p + a q` with `0 <= p < a`.
pub fn composite_split(l: usize, a: usize, b: usize) -> Result<(usize, usize)> {
    if a == 0 || l >= a * b {
        return Err(Error::IndexOutOfRange(format!("{l} for a {a}x{b} composite")));
    }
    Ok((l % a, l / a))
}

pub fn composite_join(p: usize, q: usize, a: usize) -> usize {
    p + a * q
}

/// Nested multi-index families for all levels of a d-way tensor.
///
/// `left[k]` holds `I^{<=k}` (prefixes of length k) and `right[k]` holds
/// `I^{>k}` (suffixes over modes `k..d`), for `k` in `0..=d`. The boundary
/// sets `left[0]` and `right[d]` contain one empty index; `right[0]` and
/// `left[d]` are empty. `left_pos[k]` / `right_pos[k]` are the DEIM picks
/// that produced level k (composite positions into the restricted basis).
#[derive(Debug, Clone, PartialEq)]
pub struct NestedIndexSets {
    pub d: usize,
    pub left: Vec<Vec<Vec<usize>>>,
    pub right: Vec<Vec<Vec<usize>>>,
    pub left_pos: Vec<Vec<usize>>,
    pub right_pos: Vec<Vec<usize>>,
}

impl NestedIndexSets {
    pub fn empty(d: usize) -> Self {
        let mut left = vec![Vec::new(); d + 1];
        let mut right = vec![Vec::new(); d + 1];
        left[0] = vec![Vec::new()];
        right[d] = vec![Vec::new()];
        Self { d, left, right, left_pos: vec![Vec::new(); d + 1], right_pos: vec![Vec::new(); d + 1] }
    }

    /// Sizes `|I^{<=k}|` for `k` in `1..d`.
    pub fn left_sizes(&self) -> Vec<usize> {
        (1..self.d).map(|k| self.left[k].len()).collect()
    }

    pub fn right_sizes(&self) -> Vec<usize> {
        (1..self.d).map(|k| self.right[k].len()).collect()
    }

    /// Checks that every left index extends a member of the previous level
    /// and every right index prefixes one onto a member of the next level,
    /// and that each level has distinct members.
    pub fn is_nested(&self) -> bool {
        let d = self.d;
        for k in 1..d {
            let cur = &self.left[k];
            if !distinct(cur) {
                return false;
            }
            if cur.iter().any(|x| x.len() != k || !self.left[k - 1].contains(&x[..k - 1].to_vec())) {
                return false;
            }
            let cur = &self.right[k];
            if !distinct(cur) {
                return false;
            }
            if cur.iter().any(|x| x.len() != d - k || !self.right[k + 1].contains(&x[1..].to_vec())) {
                return false;
            }
        }
        true
    }

    /// Full multi-index for the pivot entry `(I^{<=k}_a, I^{>k}_b)`.
    pub fn pivot_index(&self, k: usize, a: usize, b: usize) -> Vec<usize> {
        let mut idx = self.left[k][a].clone();
        idx.extend_from_slice(&self.right[k][b]);
        idx
    }

    /// Reverses the mode order (left and right families swap).
    pub fn reversed(&self) -> Self {
        let d = self.d;
        let rev = |v: &Vec<usize>| v.iter().rev().copied().collect::<Vec<_>>();
        let left = (0..=d).map(|k| self.right[d - k].iter().map(rev).collect()).collect();
        let right = (0..=d).map(|k| self.left[d - k].iter().map(rev).collect()).collect();
        let left_pos = (0..=d).map(|k| self.right_pos[d - k].clone()).collect();
        let right_pos = (0..=d).map(|k| self.left_pos[d - k].clone()).collect();
        Self { d, left, right, left_pos, right_pos }
    }
}

fn distinct(v: &[Vec<usize>]) -> bool {
    let mut s: Vec<&Vec<usize>> = v.iter().collect();
    s.sort();
    s.windows(2).all(|w| w[0] != w[1])
}

/// One left-sweep level: restricts the left-orthogonal core `u` (mode k-1)
/// to the previous index set through `m_prev`, selects `count` rows and
/// returns `(positions, I^{<=k}, M_k)`.
pub fn left_level(
    prev: &[Vec<usize>],
    m_prev: &Matrix,
    u: &TtCore,
    count: usize,
    level: usize,
) -> Result<(Vec<usize>, Vec<Vec<usize>>, Matrix)> {
    let hat = u.left_mul(m_prev).left_unfolding();
    let count = count.min(hat.rows()).max(u.r_right());
    let pos = deim_oversampled(&hat, count).map_err(|e| relabel(e, level))?;
    let a = prev.len();
    let sets = pos
        .iter()
        .map(|&p| {
            let (alpha, i) = composite_split(p, a, u.n()).expect("position in range");
            let mut idx = prev[alpha].clone();
            idx.push(i);
            idx
        })
        .collect();
    let m = hat.select_rows(&pos);
    Ok((pos, sets, m))
}

/// One right-sweep level for the right-orthogonal core `v` (mode k):
/// returns `(positions, I^{>k}, N_k)`.
pub fn right_level(
    next: &[Vec<usize>],
    n_next: &Matrix,
    v: &TtCore,
    count: usize,
    level: usize,
) -> Result<(Vec<usize>, Vec<Vec<usize>>, Matrix)> {
    // hat(i + n a', a) = sum_b V(a, i, b) N(a', b)
    let hat = v.right_mul(&n_next.transpose()).right_unfolding().transpose();
    let count = count.min(hat.rows()).max(v.r_left());
    let pos = deim_oversampled(&hat, count).map_err(|e| relabel(e, level))?;
    let sets = pos
        .iter()
        .map(|&p| {
            let (i, alpha) = composite_split(p, v.n(), next.len()).expect("position in range");
            let mut idx = vec![i];
            idx.extend_from_slice(&next[alpha]);
            idx
        })
        .collect();
    let n = hat.select_rows(&pos);
    Ok((pos, sets, n))
}

fn relabel(e: Error, level: usize) -> Error {
    match e {
        Error::Deim { reason, .. } => Error::Deim { level, reason },
        other => other,
    }
}

/// Output of the TT-cross-DEIM sweeps.
#[derive(Debug, Clone)]
pub struct CrossDeim {
    pub sets: NestedIndexSets,
    /// `m[k-1] = U_{<=k}(I^{<=k}, :)` for levels `1..d`.
    pub m: Vec<Matrix>,
    /// `n[k-1] = V_{>k}(I^{>k}, :)` for levels `1..d`.
    pub n: Vec<Matrix>,
}

impl CrossDeim {
    pub fn cond_m(&self) -> Vec<f64> {
        self.m.iter().map(linalg::cond2).collect()
    }

    pub fn cond_n(&self) -> Vec<f64> {
        self.n.iter().map(linalg::cond2).collect()
    }
}

/// Left sweep only; fills `left`/`left_pos` and returns the `M_k`.
pub fn left_sweep(family: &OrthFamily, extra: &[usize], sets: &mut NestedIndexSets) -> Result<Vec<Matrix>> {
    let d = family.ndim();
    let mut ms = Vec::with_capacity(d - 1);
    let mut m_prev = Matrix::identity(1);
    for k in 1..d {
        let u = family.u(k - 1);
        let count = u.r_right() + extra.get(k - 1).copied().unwrap_or(0);
        let (pos, idx, m) = left_level(&sets.left[k - 1], &m_prev, u, count, k)?;
        sets.left[k] = idx;
        sets.left_pos[k] = pos;
        m_prev = m.clone();
        ms.push(m);
    }
    Ok(ms)
}

/// Right sweep only; fills `right`/`right_pos` and returns the `N_k`.
pub fn right_sweep(family: &OrthFamily, extra: &[usize], sets: &mut NestedIndexSets) -> Result<Vec<Matrix>> {
    let d = family.ndim();
    let mut ns = vec![Matrix::zeros(0, 0); d - 1];
    let mut n_next = Matrix::identity(1);
    for k in (1..d).rev() {
        let v = family.v(k);
        let count = v.r_left() + extra.get(k - 1).copied().unwrap_or(0);
        let (pos, idx, n) = right_level(&sets.right[k + 1], &n_next, v, count, k)?;
        sets.right[k] = idx;
        sets.right_pos[k] = pos;
        n_next = n.clone();
        ns[k - 1] = n;
    }
    Ok(ns)
}

/// TT-cross-DEIM: nested index sets for every level from the orthogonalized
/// family. `extra[k-1]` additional indices are oversampled at level k on
/// both sides (empty slice for plain DEIM).
pub fn tt_cross_deim(family: &OrthFamily, extra: &[usize]) -> Result<CrossDeim> {
    let d = family.ndim();
    let mut sets = NestedIndexSets::empty(d);
    let m = left_sweep(family, extra, &mut sets)?;
    let n = right_sweep(family, extra, &mut sets)?;
    Ok(CrossDeim { sets, m, n })
}
