//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed; keeps stage seeds decorrelated.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minimum-norm least-squares solution of `a x = b` through an SVD.
///
/// Singular values below `rcond * s_max` are treated as zero. Returns the
/// solution and the numerical rank that was used.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rcond: f64) -> Result<(DMatrix<f64>, usize)> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim(format!(
            "lstsq: {} rows in A, {} rows in b",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() == 0 {
        return Ok((DMatrix::zeros(0, b.ncols()), 0));
    }
    let svd = a.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let eps = if s_max > 0.0 { rcond * s_max } else { 0.0 };
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let x = svd
        .solve(b, eps.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok((x, rank))
}

pub fn lstsq_vec(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> Result<(DVector<f64>, usize)> {
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let (x, rank) = lstsq(a, &bm, rcond)?;
    Ok((x.column(0).into_owned(), rank))
}

/// Default relative cut-off for least-squares solves.
pub const RCOND: f64 = 1e-13;

/// Numerical rank with tolerance `max(rows, cols) * tol_eps * s_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol_eps: f64) -> (usize, Vec<f64>) {
    if m.is_empty() {
        return (0, Vec::new());
    }
    let sv = m.clone().svd(false, false).singular_values;
    let s_max = sv.max();
    let tol = m.nrows().max(m.ncols()) as f64 * tol_eps * s_max;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    (rank, s)
}

/// 2-norm condition number.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Inverse of a square matrix, refusing matrices whose condition number
/// exceeds `cond_cap`.
pub fn checked_inverse(m: &DMatrix<f64>, cond_cap: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::dim(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let cond = condition_number(m);
    if !cond.is_finite() || cond > cond_cap {
        return Err(Error::Singular(format!(
            "condition number {cond:.3e} exceeds cap {cond_cap:.1e}"
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("matrix is not invertible".into()))
}

/// Column 2-norms.
pub fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

/// Solves a symmetric positive definite pentadiagonal system in place.
///
/// `diag`, `off1` and `off2` hold the main, first and second
/// super-diagonals; `rhs` is overwritten with the solution. Uses a banded
/// LDLᵀ factorisation.
pub fn solve_spd_pentadiagonal(diag: &[f64], off1: &[f64], off2: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = diag.len();
    if rhs.len() != n || off1.len() + 1 < n || off2.len() + 2 < n {
        return Err(Error::dim("pentadiagonal system sizes disagree"));
    }
    // L has unit diagonal with sub-diagonals l1, l2.
    let mut d = vec![0.0; n];
    let mut l1 = vec![0.0; n];
    let mut l2 = vec![0.0; n];
    for i in 0..n {
        let mut di = diag[i];
        if i >= 1 {
            di -= l1[i] * l1[i] * d[i - 1];
        }
        if i >= 2 {
            di -= l2[i] * l2[i] * d[i - 2];
        }
        if di <= 0.0 || !di.is_finite() {
            return Err(Error::Singular("pentadiagonal matrix not positive definite".into()));
        }
        d[i] = di;
        // l2[i+1] was set on the previous step
        if i + 1 < n {
            let mut a = off1[i];
            if i >= 1 {
                a -= l2[i + 1] * l1[i] * d[i - 1];
            }
            l1[i + 1] = a / d[i];
        }
        if i + 2 < n {
            l2[i + 2] = off2[i] / d[i];
        }
    }
    // forward substitution L y = b
    for i in 0..n {
        let mut v = rhs[i];
        if i >= 1 {
            v -= l1[i] * rhs[i - 1];
        }
        if i >= 2 {
            v -= l2[i] * rhs[i - 2];
        }
        rhs[i] = v;
    }
    for i in 0..n {
        rhs[i] /= d[i];
    }
    // back substitution Lᵀ x = y
    for i in (0..n).rev() {
        let mut v = rhs[i];
        if i + 1 < n {
            v -= l1[i + 1] * rhs[i + 1];
        }
        if i + 2 < n {
            v -= l2[i + 2] * rhs[i + 2];
        }
        rhs[i] = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pentadiagonal_matches_dense_solve() {
        let n = 9;
        let mut r = rng(3);
        let mut dense = DMatrix::<f64>::zeros(n, n);
        let diag: Vec<f64> = (0..n).map(|_| 6.0 + r.random::<f64>()).collect();
        let off1: Vec<f64> = (0..n - 1).map(|_| r.random::<f64>() - 0.5).collect();
        let off2: Vec<f64> = (0..n - 2).map(|_| r.random::<f64>() - 0.5).collect();
        for i in 0..n {
            dense[(i, i)] = diag[i];
            if i + 1 < n {
                dense[(i, i + 1)] = off1[i];
                dense[(i + 1, i)] = off1[i];
            }
            if i + 2 < n {
                dense[(i, i + 2)] = off2[i];
                dense[(i + 2, i)] = off2[i];
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        solve_spd_pentadiagonal(&diag, &off1, &off2, &mut x).unwrap();
        let xd = dense.lu().solve(&DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-12, "{i}: {} vs {}", x[i], xd[i]);
        }
    }

    #[test]
    fn lstsq_recovers_exact_solution() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let x = DVector::from_vec(vec![0.5, -2.0]);
        let b = &a * &x;
        let (sol, rank) = lstsq_vec(&a, &b, RCOND).unwrap();
        assert_eq!(rank, 2);
        assert!((sol - x).norm() < 1e-14);
    }

    #[test]
    fn checked_inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(checked_inverse(&m, 1e10).is_err());
    }
}
