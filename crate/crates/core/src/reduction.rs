//! Structural reduction of decoupled maps: branch unification and
//! one-at-a-time branch removal, scored by relative function error.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoupling::fit::branch_outputs;
use crate::decoupling::refine::refine;
use crate::error::{Error, Result};
use crate::linalg::{lstsq, RCOND};
use crate::model::Nonlinearity;
use crate::optim::LmConfig;
use crate::poly::{BranchPolynomial, DecoupledMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionErrorReport {
    /// `rms(q_j − q̃_j) / rms(q_j)` per output.
    pub per_output_ef: Vec<f64>,
    /// `‖q − q̃‖_F / ‖q‖_F`.
    pub aggregate_ef: f64,
}

/// Row `k` is the map evaluated at point `k`.
pub fn function_outputs(map: &Nonlinearity, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if points.ncols() != map.n_in() {
        return Err(Error::dim(format!("points have {} coordinates, map takes {}", points.ncols(), map.n_in())));
    }
    let rows: Vec<Vec<f64>> = (0..points.nrows())
        .into_par_iter()
        .map(|k| {
            let p: Vec<f64> = points.row(k).iter().copied().collect();
            map.eval(&p).map(|v| v.iter().copied().collect())
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(points.nrows(), map.n_out(), |k, j| rows[k][j]))
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Outputs whose reference rms is at roundoff level relative to the overall
/// rms are normalised by the overall rms.
pub fn function_error(q: &DMatrix<f64>, q_hat: &DMatrix<f64>) -> Result<FunctionErrorReport> {
    if q.shape() != q_hat.shape() {
        return Err(Error::dim(format!("outputs {:?} vs {:?}", q.shape(), q_hat.shape())));
    }
    let n = q.nrows().max(1) as f64;
    let global = q.norm() / (q.len().max(1) as f64).sqrt();
    let per_output_ef = (0..q.ncols())
        .map(|j| {
            let d = (q.column(j) - q_hat.column(j)).norm() / n.sqrt();
            let r = q.column(j).norm() / n.sqrt();
            ratio(d, if r > 1e-12 * global { r } else { global })
        })
        .collect();
    Ok(FunctionErrorReport { per_output_ef, aggregate_ef: ratio((q - q_hat).norm(), q.norm()) })
}

pub fn decoupled_outputs(dec: &DecoupledMap, points: &DMatrix<f64>) -> DMatrix<f64> {
    let g = branch_outputs(dec, points);
    g * dec.w.transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnifyOptions {
    /// α candidates are `±2^j` for `j` in this range.
    pub alpha_exp_min: i32,
    pub alpha_exp_max: i32,
    pub max_iter: usize,
}

impl Default for UnifyOptions {
    fn default() -> Self {
        Self { alpha_exp_min: -3, alpha_exp_max: 3, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct UnifyResult {
    pub map: DecoupledMap,
    pub report: FunctionErrorReport,
    /// Error after the scaling step, before optimisation.
    pub initial_report: FunctionErrorReport,
    /// Branch whose polynomial seeded the shared form.
    pub template_branch: usize,
    /// The optimiser returned a non-finite or worse iterate.
    pub flagged: bool,
}

/// Copies branch `b`'s polynomial to every branch with per-branch input and
/// output scalings, `g_i(z) ≈ β_i g_b(α_i z)`.
fn scaled_unification(dec: &DecoupledMap, z: &DMatrix<f64>, b: usize, opts: &UnifyOptions) -> DecoupledMap {
    let tpl = dec.branches[b].clone();
    let mut out = dec.clone();
    for i in 0..dec.r() {
        out.branches[i] = BranchPolynomial::new(tpl.lowest, tpl.coeffs.clone());
        if i == b {
            continue;
        }
        let gi: Vec<f64> = z.column(i).iter().map(|&v| dec.branches[i].eval(v)).collect();
        let mut best = (f64::INFINITY, 1.0, 0.0);
        for j in opts.alpha_exp_min..=opts.alpha_exp_max {
            for sign in [1.0, -1.0] {
                let alpha = sign * 2f64.powi(j);
                let s: Vec<f64> = z.column(i).iter().map(|&v| tpl.eval(alpha * v)).collect();
                let ss: f64 = s.iter().map(|v| v * v).sum();
                let beta = if ss > 0.0 { gi.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss } else { 0.0 };
                let res: f64 = gi.iter().zip(&s).map(|(a, b)| (a - beta * b).powi(2)).sum();
                if res < best.0 {
                    best = (res, alpha, beta);
                }
            }
        }
        out.v.column_mut(i).scale_mut(best.1);
        out.w.column_mut(i).scale_mut(best.2);
    }
    out.unified = true;
    out
}

/// Constrains all branches to one polynomial, then optimises `(W, V, θ)`
/// against the outputs of the original map at `points`.
pub fn unify_branches(dec: &DecoupledMap, points: &DMatrix<f64>, opts: &UnifyOptions) -> Result<UnifyResult> {
    if points.ncols() != dec.n_in() {
        return Err(Error::dim("points do not match the map"));
    }
    if dec.r() == 0 {
        return Err(Error::invalid("map has no branches"));
    }
    let q = decoupled_outputs(dec, points);
    if dec.unified {
        let report = function_error(&q, &q)?;
        return Ok(UnifyResult { map: dec.clone(), initial_report: report.clone(), report, template_branch: 0, flagged: false });
    }
    let lowest = dec.branches[0].lowest;
    if dec.branches.iter().any(|b| b.lowest != lowest || b.coeffs.len() != dec.branches[0].coeffs.len()) {
        return Err(Error::invalid("branches must share lowest power and degree to unify"));
    }
    let z = points * &dec.v;
    let candidates: Vec<(usize, DecoupledMap, FunctionErrorReport)> = (0..dec.r())
        .into_par_iter()
        .map(|b| {
            let m = scaled_unification(dec, &z, b, opts);
            let rep = function_error(&q, &decoupled_outputs(&m, points))?;
            Ok((b, m, rep))
        })
        .collect::<Result<_>>()?;
    let (b, start, initial_report) = candidates
        .into_iter()
        .min_by(|a, b| a.2.aggregate_ef.total_cmp(&b.2.aggregate_ef).then(a.0.cmp(&b.0)))
        .expect("at least one branch");
    let cfg = LmConfig { max_iter: opts.max_iter, ..Default::default() };
    let (map, res) = refine(&start, points, &q, &cfg)?;
    let report = function_error(&q, &decoupled_outputs(&map, points))?;
    let flagged = !res.cost.is_finite() || report.aggregate_ef > initial_report.aggregate_ef;
    if flagged {
        log::warn!("unification optimiser did not improve on the scaled start");
    }
    Ok(UnifyResult { map, report, initial_report, template_branch: b, flagged })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Refit {
    None,
    #[default]
    Linear,
    Nonlinear,
}

impl std::str::FromStr for Refit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Refit::None),
            "linear" => Ok(Refit::Linear),
            "nonlinear" => Ok(Refit::Nonlinear),
            other => Err(Error::invalid(format!("unknown refit '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoveOptions {
    pub refit: Refit,
    pub max_iter: usize,
}

impl Default for RemoveOptions {
    fn default() -> Self {
        Self { refit: Refit::Linear, max_iter: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct RemovalResult {
    pub map: DecoupledMap,
    pub report: FunctionErrorReport,
    /// Error of plain deletion of the same branch.
    pub deletion_report: FunctionErrorReport,
    pub removed_index: usize,
}

fn drop_branch(dec: &DecoupledMap, c: usize) -> DecoupledMap {
    let keep: Vec<usize> = (0..dec.r()).filter(|&i| i != c).collect();
    DecoupledMap {
        w: dec.w.select_columns(&keep),
        v: dec.v.select_columns(&keep),
        branches: keep.iter().map(|&i| dec.branches[i].clone()).collect(),
        unified: dec.unified,
    }
}

/// Deletes branch `c` and, with `compensate`, adds `Δ_W` so the remaining
/// branches reproduce its contribution in least squares.
pub fn remove_specific(dec: &DecoupledMap, points: &DMatrix<f64>, c: usize, compensate: bool) -> Result<DecoupledMap> {
    if c >= dec.r() {
        return Err(Error::invalid(format!("branch {c} out of range")));
    }
    let mut out = drop_branch(dec, c);
    if compensate && out.r() > 0 {
        let g_rem = branch_outputs(&out, points);
        let z = points * dec.v.column(c);
        let gc = z.map(|v| dec.branches[c].eval(v));
        let q_c = &gc * dec.w.column(c).transpose();
        let (delta_t, _) = lstsq(&g_rem, &q_c, RCOND)?;
        out.w += delta_t.transpose();
    }
    Ok(out)
}

/// Tries every branch, commits the removal with the smallest aggregate
/// `e_f` (ties to the smaller index).
pub fn remove_branch(dec: &DecoupledMap, points: &DMatrix<f64>, opts: &RemoveOptions) -> Result<RemovalResult> {
    remove_branch_among(dec, points, opts, &(0..dec.r()).collect::<Vec<_>>())
}

/// [`remove_branch`] restricted to the candidate branches in `allowed`.
pub fn remove_branch_among(dec: &DecoupledMap, points: &DMatrix<f64>, opts: &RemoveOptions, allowed: &[usize]) -> Result<RemovalResult> {
    if allowed.is_empty() || allowed.iter().any(|&c| c >= dec.r()) {
        return Err(Error::invalid("no valid removal candidates"));
    }
    if dec.r() < 2 {
        return Err(Error::invalid("need at least two branches to remove one"));
    }
    if points.ncols() != dec.n_in() {
        return Err(Error::dim("points do not match the map"));
    }
    let q = decoupled_outputs(dec, points);
    let compensate = opts.refit != Refit::None;
    let scored: Vec<(usize, DecoupledMap, FunctionErrorReport, FunctionErrorReport)> = allowed
        .par_iter()
        .copied()
        .map(|c| {
            let plain = remove_specific(dec, points, c, false)?;
            let plain_rep = function_error(&q, &decoupled_outputs(&plain, points))?;
            let m = if compensate { remove_specific(dec, points, c, true)? } else { plain };
            let rep = function_error(&q, &decoupled_outputs(&m, points))?;
            Ok((c, m, rep, plain_rep))
        })
        .collect::<Result<_>>()?;
    let (c, mut map, mut report, deletion_report) = scored
        .into_iter()
        .min_by(|a, b| a.2.aggregate_ef.total_cmp(&b.2.aggregate_ef).then(a.0.cmp(&b.0)))
        .expect("r ≥ 2");
    if opts.refit == Refit::Nonlinear && report.aggregate_ef > 0.0 {
        let cfg = LmConfig { max_iter: opts.max_iter, ..Default::default() };
        let (m, _) = refine(&map, points, &q, &cfg)?;
        let rep = function_error(&q, &decoupled_outputs(&m, points))?;
        if rep.aggregate_ef <= report.aggregate_ef {
            map = m;
            report = rep;
        }
    }
    Ok(RemovalResult { map, report, deletion_report, removed_index: c })
}

/// Repeated [`remove_branch`] down to `r_target` branches.
pub fn reduce_to(
    dec: &DecoupledMap,
    points: &DMatrix<f64>,
    r_target: usize,
    opts: &RemoveOptions,
) -> Result<(DecoupledMap, Vec<RemovalResult>)> {
    if r_target < 1 || r_target >= dec.r() {
        return Err(Error::invalid(format!("target {r_target} must satisfy 1 ≤ target < r = {}", dec.r())));
    }
    let mut cur = dec.clone();
    let mut steps = Vec::new();
    while cur.r() > r_target {
        let step = remove_branch(&cur, points, opts)?;
        cur = step.map.clone();
        steps.push(step);
    }
    Ok((cur, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng(seed);
        DMatrix::from_fn(n, d, |_, _| g.sample(StandardNormal))
    }

    fn cube(w: &[f64], v: &[f64], r: usize, n_in: usize) -> DecoupledMap {
        let n_out = w.len() / r;
        DecoupledMap::new(
            DMatrix::from_row_slice(n_out, r, w),
            DMatrix::from_row_slice(n_in, r, v),
            vec![BranchPolynomial::new(3, vec![1.0]); r],
            false,
        )
        .unwrap()
    }

    #[test]
    fn error_report_basics() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let r = function_error(&q, &q).unwrap();
        assert_eq!(r.aggregate_ef, 0.0);
        let z = DMatrix::zeros(2, 2);
        let r = function_error(&q, &z).unwrap();
        assert!((r.aggregate_ef - 1.0).abs() < 1e-15);
        assert_eq!(r.per_output_ef[1], 0.0);
        let r = function_error(&z, &z).unwrap();
        assert_eq!(r.aggregate_ef, 0.0);
    }

    #[test]
    fn outputs_match_pointwise_eval() {
        let d = cube(&[1.0, 2.0], &[0.3, 0.1, -0.5, 0.9], 2, 2);
        let p = gaussian_points(50, 2, 1);
        let q = function_outputs(&d.clone().into(), &p).unwrap();
        let q2 = decoupled_outputs(&d, &p);
        for k in 0..50 {
            let e = d.eval(&[p[(k, 0)], p[(k, 1)]]).unwrap();
            assert!((q[(k, 0)] - e[0]).abs() < 1e-14);
            assert!((q2[(k, 0)] - e[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn already_unified_is_unchanged() {
        let mut d = cube(&[1.0, 2.0], &[0.3, 0.1, -0.5, 0.9], 2, 2);
        d.unified = true;
        let p = gaussian_points(100, 2, 2);
        let u = unify_branches(&d, &p, &UnifyOptions::default()).unwrap();
        assert_eq!(u.map, d);
        assert_eq!(u.report.aggregate_ef, 0.0);
    }

    #[test]
    fn odd_branches_with_sign_flips_unify_exactly() {
        // g_2(z) = −g_1(z) = g_1(−z) for odd g
        let d = DecoupledMap::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.2, 0.8, -1.0]),
            vec![BranchPolynomial::new(1, vec![0.5, 0.0, 1.0]), BranchPolynomial::new(1, vec![-0.5, 0.0, -1.0])],
            false,
        )
        .unwrap();
        let p = gaussian_points(200, 2, 3);
        let u = unify_branches(&d, &p, &UnifyOptions::default()).unwrap();
        assert!(u.report.aggregate_ef < 1e-8, "{:?}", u.report);
        assert!(u.map.unified);
        assert!(u.map.branches.windows(2).all(|b| b[0].coeffs == b[1].coeffs));
    }

    #[test]
    fn duplicate_branch_folds_into_twin() {
        let d = cube(&[1.0, 0.5, 2.0, 0.2, -0.7, 0.4], &[0.3, 0.3, 0.8, 0.9, 0.9, -0.1], 3, 2);
        let p = gaussian_points(300, 2, 4);
        let res = remove_branch(&d, &p, &RemoveOptions::default()).unwrap();
        assert!(res.report.aggregate_ef < 1e-10);
        assert!(res.removed_index <= 1);
        let twin = 1 - res.removed_index;
        assert!((res.map.w[(0, twin)] - 1.5).abs() < 1e-9);
        assert!((res.map.w[(1, twin)] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_column_removed_first() {
        let d = cube(&[1.0, 0.0, 2.0, 0.5, 0.0, -1.0], &[0.3, 0.7, 0.8, 0.9, -0.2, -0.1], 3, 2);
        let p = gaussian_points(200, 2, 5);
        let res = remove_branch(&d, &p, &RemoveOptions { refit: Refit::None, ..Default::default() }).unwrap();
        assert_eq!(res.removed_index, 1);
        assert_eq!(res.report.aggregate_ef, 0.0);
    }

    #[test]
    fn roundoff_output_uses_overall_scale() {
        let q = DMatrix::from_row_slice(2, 2, &[1e-18, 1.0, -1e-18, 2.0]);
        let q_hat = DMatrix::from_row_slice(2, 2, &[-1e-18, 1.0, 1e-18, 2.0]);
        let rep = function_error(&q, &q_hat).unwrap();
        assert!(rep.per_output_ef[0] < 1e-15);
    }

    #[test]
    fn restricted_candidates_skip_the_best() {
        let d = cube(&[1.0, 0.0, 2.0, 0.5, 0.0, -1.0], &[0.3, 0.7, 0.8, 0.9, -0.2, -0.1], 3, 2);
        let p = gaussian_points(200, 2, 5);
        let opts = RemoveOptions { refit: Refit::None, ..Default::default() };
        let res = remove_branch_among(&d, &p, &opts, &[0, 2]).unwrap();
        assert_ne!(res.removed_index, 1);
        assert!(res.report.aggregate_ef > 0.0);
        assert!(remove_branch_among(&d, &p, &opts, &[]).is_err());
        assert!(remove_branch_among(&d, &p, &opts, &[3]).is_err());
    }

    #[test]
    fn padded_rank_one_reduces_exactly() {
        let d = cube(&[1.5, 0.0, 0.0, 0.0], &[0.6, 0.1, 0.2, 0.3, 0.8, -0.4, 0.5, 0.9], 4, 2);
        let p = gaussian_points(200, 2, 6);
        let (m, steps) = reduce_to(&d, &p, 1, &RemoveOptions::default()).unwrap();
        assert_eq!(m.r(), 1);
        assert_eq!(steps.len(), 3);
        let q = decoupled_outputs(&d, &p);
        let e = function_error(&q, &decoupled_outputs(&m, &p)).unwrap();
        assert!(e.aggregate_ef < 1e-10);
    }

    #[test]
    fn compensation_and_nonlinear_refit_never_hurt() {
        for seed in 0..5 {
            let mut g = rng(100 + seed);
            let w: Vec<f64> = (0..6).map(|_| g.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..6).map(|_| g.sample(StandardNormal)).collect();
            let d = cube(&w, &v, 3, 2);
            let p = gaussian_points(300, 2, seed);
            let lin = remove_branch(&d, &p, &RemoveOptions::default()).unwrap();
            assert!(lin.report.aggregate_ef <= lin.deletion_report.aggregate_ef + 1e-12);
            let nl = remove_branch(&d, &p, &RemoveOptions { refit: Refit::Nonlinear, ..Default::default() }).unwrap();
            assert!(nl.report.aggregate_ef <= lin.report.aggregate_ef + 1e-12);
        }
    }
}
