//! Univariate branch polynomials from CPD factors.

use nalgebra::{DMatrix, DVector};

use super::cpd::CpdFactors;
use super::points::OperatingPointSet;
use crate::error::{Error, Result};
use crate::linalg::{lstsq_vec, RCOND};
use crate::poly::{BranchPolynomial, DecoupledMap};

/// Column-scaled least squares; returns the unscaled solution.
fn scaled_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let mut a = a.clone();
    let mut s = vec![1.0; a.ncols()];
    for (j, mut c) in a.column_iter_mut().enumerate() {
        let n = c.norm();
        if n > 0.0 {
            c.unscale_mut(n);
            s[j] = n;
        }
    }
    let (x, _) = lstsq_vec(&a, b, RCOND)?;
    Ok(DVector::from_iterator(x.len(), x.iter().zip(&s).map(|(v, s)| v / s)))
}

fn distinct_count(z: &DVector<f64>) -> usize {
    let mut v: Vec<f64> = z.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    let mut n = usize::from(!v.is_empty());
    for w in v.windows(2) {
        if w[1] - w[0] > 1e-12 * scale {
            n += 1;
        }
    }
    n
}

/// Fits `g_i' ≈ h_i` as a polynomial in `z_i = v_iᵀ p` with powers
/// `lowest−1 ..= degree−1`, then integrates term-wise.
pub fn branch_from_derivative(z: &DVector<f64>, h: &DVector<f64>, degree: u32, lowest: u32) -> Result<BranchPolynomial> {
    if lowest < 1 || degree < lowest {
        return Err(Error::invalid(format!("need degree ≥ lowest ≥ 1, got degree {degree}, lowest {lowest}")));
    }
    let nc = (degree - lowest + 1) as usize;
    if distinct_count(z) < nc {
        return Err(Error::RankDeficient(format!("{} distinct z values for {nc} coefficients", distinct_count(z))));
    }
    // g = Σ θ_d z^d, g' = Σ d θ_d z^(d−1): regress directly on θ
    let a = DMatrix::from_fn(z.len(), nc, |k, c| {
        let d = lowest + c as u32;
        d as f64 * z[k].powi(d as i32 - 1)
    });
    let theta = scaled_lstsq(&a, h)?;
    Ok(BranchPolynomial::new(lowest, theta.iter().copied().collect()))
}

/// `G[k, i] = g_i(z_ki)`.
pub fn branch_outputs(dec: &DecoupledMap, points: &DMatrix<f64>) -> DMatrix<f64> {
    let z = points * &dec.v;
    DMatrix::from_fn(points.nrows(), dec.r(), |k, i| dec.branches[i].eval(z[(k, i)]))
}

/// Least-squares `W` for fixed `V` and branches so that `G Wᵀ ≈ q`.
pub fn refit_w(dec: &DecoupledMap, points: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = branch_outputs(dec, points);
    let cols: Vec<DVector<f64>> = (0..q.ncols())
        .map(|j| scaled_lstsq(&g, &q.column(j).into_owned()))
        .collect::<Result<_>>()?;
    let wt = DMatrix::from_columns(&cols);
    Ok(wt.transpose())
}

/// Least-squares branch coefficients for fixed `W`, `V`; linear because
/// the model is linear in θ. A unified map keeps one shared θ.
pub fn refit_theta(dec: &DecoupledMap, points: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DecoupledMap> {
    let (n, n_out, r) = (points.nrows(), dec.n_out(), dec.r());
    if r == 0 {
        return Ok(dec.clone());
    }
    let z = points * &dec.v;
    let sizes: Vec<usize> = dec.branches.iter().map(|b| b.coeffs.len()).collect();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &s| {
        let o = *acc;
        if !dec.unified {
            *acc += s;
        }
        Some(o)
    }).collect();
    let n_theta = if dec.unified { sizes[0] } else { sizes.iter().sum() };
    let mut a = DMatrix::zeros(n * n_out, n_theta);
    let mut b = DVector::zeros(n * n_out);
    for k in 0..n {
        for j in 0..n_out {
            let row = k * n_out + j;
            b[row] = q[(k, j)];
            for i in 0..r {
                let lo = dec.branches[i].lowest;
                for d in 0..sizes[i] {
                    a[(row, offsets[i] + d)] += dec.w[(j, i)] * z[(k, i)].powi((lo + d as u32) as i32);
                }
            }
        }
    }
    let theta = scaled_lstsq(&a, &b)?;
    let branches = (0..r)
        .map(|i| BranchPolynomial::new(dec.branches[i].lowest, theta.rows(offsets[i], sizes[i]).iter().copied().collect()))
        .collect();
    DecoupledMap::new(dec.w.clone(), dec.v.clone(), branches, dec.unified)
}

/// Branches from the CPD factors. With a target `q` (`N × n_out`, the
/// coupled outputs at the points), `W` is refit, and with `joint` all θ are
/// then refit together followed by a final `W` refit.
pub fn fit_branches(
    factors: &CpdFactors,
    points: &OperatingPointSet,
    degree: u32,
    lowest: u32,
    target: Option<&DMatrix<f64>>,
    joint: bool,
) -> Result<DecoupledMap> {
    if points.n_in() != factors.v.nrows() || points.len() != factors.h.nrows() {
        return Err(Error::dim("operating points do not match the factors"));
    }
    let z = &points.points * &factors.v;
    let branches = (0..factors.r())
        .map(|i| branch_from_derivative(&z.column(i).into_owned(), &factors.h.column(i).into_owned(), degree, lowest))
        .collect::<Result<Vec<_>>>()?;
    let mut dec = DecoupledMap::new(factors.w.clone(), factors.v.clone(), branches, false)?;
    if let Some(q) = target {
        if q.nrows() != points.len() || q.ncols() != dec.n_out() {
            return Err(Error::dim("target outputs do not match points/map"));
        }
        dec.w = refit_w(&dec, &points.points, q)?;
        if joint {
            dec = refit_theta(&dec, &points.points, q)?;
            dec.w = refit_w(&dec, &points.points, q)?;
        }
    }
    Ok(dec)
}

/// Rescales every non-unified branch so that `‖v_i‖ = 1`, adjusting the
/// polynomial coefficients; the map is unchanged.
pub fn normalise_v(dec: &DecoupledMap) -> DecoupledMap {
    if dec.unified {
        return dec.clone();
    }
    let mut out = dec.clone();
    for i in 0..dec.r() {
        let s = dec.v.column(i).norm();
        if s == 0.0 {
            continue;
        }
        out.v.column_mut(i).unscale_mut(s);
        let b = &mut out.branches[i];
        for (d, c) in b.coeffs.iter_mut().enumerate() {
            *c *= s.powi((b.lowest + d as u32) as i32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn cubic_from_exact_derivative() {
        let z = DVector::from_fn(20, |k, _| -1.0 + 0.1 * k as f64);
        let h = z.map(|v| 3.0 * v * v);
        let b = branch_from_derivative(&z, &h, 3, 3).unwrap();
        assert_eq!(b.coeffs.len(), 1);
        assert!((b.coeffs[0] - 1.0).abs() < 1e-10);
        let b = branch_from_derivative(&z, &h, 4, 2).unwrap();
        assert!((b.coeffs[0]).abs() < 1e-10 && (b.coeffs[1] - 1.0).abs() < 1e-10 && b.coeffs[2].abs() < 1e-10);
    }

    #[test]
    fn too_few_distinct_points() {
        let z = DVector::from_vec(vec![1.0, 1.0, 2.0, 2.0]);
        let h = z.clone();
        assert!(matches!(branch_from_derivative(&z, &h, 5, 2), Err(Error::RankDeficient(_))));
        assert!(branch_from_derivative(&z, &h, 3, 2).is_ok());
    }

    #[test]
    fn noisy_derivative_still_reproduces_function() {
        let mut g = rng(9);
        let n = 500;
        let p = DMatrix::from_fn(n, 2, |_, _| g.sample::<f64, _>(StandardNormal));
        let v = DMatrix::from_row_slice(2, 1, &[0.6, 0.8]);
        let z = &p * &v;
        let h = DMatrix::from_fn(n, 1, |k, _| {
            let t = 3.0 * z[(k, 0)].powi(2) + 1.0 * z[(k, 0)];
            t * (1.0 + 0.01 * g.sample::<f64, _>(StandardNormal))
        });
        let q = DMatrix::from_fn(n, 1, |k, _| 2.0 * (z[(k, 0)].powi(3) + 0.5 * z[(k, 0)].powi(2)));
        let f = CpdFactors {
            w: DMatrix::from_element(1, 1, 2.0),
            v,
            h,
            e_cpd: 0.0,
            iterations: 0,
            converged: true,
            history: vec![],
        };
        let pts = OperatingPointSet::explicit(p.clone());
        let dec = fit_branches(&f, &pts, 3, 2, Some(&q), true).unwrap();
        let qt = DMatrix::from_fn(n, 1, |k, _| dec.eval(&pts.row(k)).unwrap()[0]);
        let ef = (&q - &qt).norm() / q.norm();
        assert!(ef < 0.05, "e_f = {ef}");
    }

    #[test]
    fn normalisation_keeps_map() {
        let dec = DecoupledMap::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 4.0, 0.1]),
            vec![BranchPolynomial::new(2, vec![1.0, 0.3]), BranchPolynomial::new(3, vec![2.0])],
            false,
        )
        .unwrap();
        let n = normalise_v(&dec);
        for i in 0..2 {
            assert!((n.v.column(i).norm() - 1.0).abs() < 1e-14);
        }
        for p in [[0.3, -0.7], [1.5, 2.0]] {
            assert!((dec.eval(&p).unwrap() - n.eval(&p).unwrap()).amax() < 1e-12);
        }
    }
}
