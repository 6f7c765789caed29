#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttflow::tensor_core::{DenseTensor, Matrix};
use ttflow::tt_format::TensorTrain;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tt(dims: &[usize], ranks: &[usize], seed: u64) -> TensorTrain {
    TensorTrain::random(dims, ranks, &mut rng(seed)).unwrap()
}

pub fn dense(y: &TensorTrain) -> DenseTensor {
    y.contract_to_dense().unwrap()
}

pub fn rel_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let num: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.values().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn max_abs_diff(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>() - 0.5)
}

/// Plain triple-loop product, independent of the library's kernels.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

/// Inverse by Gauss-Jordan with partial pivoting.
pub fn inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[(x, c)].abs().total_cmp(&m[(y, c)].abs())).unwrap();
        for j in 0..n {
            let (s, t) = (m[(c, j)], m[(p, j)]);
            m[(c, j)] = t;
            m[(p, j)] = s;
            let (s, t) = (inv[(c, j)], inv[(p, j)]);
            inv[(c, j)] = t;
            inv[(p, j)] = s;
        }
        let piv = m[(c, c)];
        for j in 0..n {
            m[(c, j)] /= piv;
            inv[(c, j)] /= piv;
        }
        for i in 0..n {
            if i != c {
                let f = m[(i, c)];
                for j in 0..n {
                    m[(i, j)] -= f * m[(c, j)];
                    inv[(i, j)] -= f * inv[(c, j)];
                }
            }
        }
    }
    inv
}

pub fn as_matrix(x: &DenseTensor) -> Matrix {
    let d = x.dims();
    Matrix::from_fn(d[0], d[1], |i, j| x.at(&[i, j]))
}

/// Random admissible TT ranks: each interior rank is at most `cap` and at
/// most the smaller unfolding dimension.
pub fn admissible_ranks(dims: &[usize], cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    let d = dims.len();
    let mut r = vec![1; d + 1];
    for k in 1..d {
        let left: usize = dims[..k].iter().product();
        let right: usize = dims[k..].iter().product();
        let hi = cap.min(left).min(right).min(r[k - 1] * dims[k - 1]);
        r[k] = rng.random_range(1..=hi);
    }
    for k in (1..d).rev() {
        r[k] = r[k].min(r[k + 1] * dims[k]);
    }
    r
}
