//! Canonical polyadic decomposition `J_k ≈ W diag(h_k) Vᵀ` by alternating
//! least squares, with an optional second-difference penalty on the columns
//! of `H` taken in order of increasing `z_i = v_iᵀ p_k`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::JacobianTensor;
use crate::error::{Error, Result};
use crate::linalg::{child_seed, lstsq, rng, solve_spd_pentadiagonal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpdOptions {
    pub max_iter: usize,
    /// Relative objective change below which a run stops.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Smoothness weight, relative to a unit-norm tensor.
    pub lambda_smooth: f64,
}

impl Default for CpdOptions {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-13, restarts: 5, seed: 0, lambda_smooth: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpdFactors {
    pub w: DMatrix<f64>,
    /// Unit-norm columns.
    pub v: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub e_cpd: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Unregularised relative objective after every factor update.
    pub history: Vec<f64>,
}

impl CpdFactors {
    pub fn r(&self) -> usize {
        self.w.ncols()
    }
}

/// `min(n_I, r) + min(n_O, r) ≥ r + 2`.
pub fn kruskal_ok(n_in: usize, n_out: usize, r: usize) -> bool {
    n_in.min(r) + n_out.min(r) >= r + 2
}

fn reconstruct_slice(w: &DMatrix<f64>, v: &DMatrix<f64>, h: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut wd = w.clone();
    for i in 0..w.ncols() {
        wd.column_mut(i).scale_mut(h[(k, i)]);
    }
    wd * v.transpose()
}

fn residual_sq(t: &JacobianTensor, w: &DMatrix<f64>, v: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    t.slices
        .iter()
        .enumerate()
        .map(|(k, s)| (s - reconstruct_slice(w, v, h, k)).norm_squared())
        .sum()
}

/// `‖𝒥 − ⟦W, V, H⟧‖² / ‖𝒥‖²`.
pub fn e_cpd(t: &JacobianTensor, w: &DMatrix<f64>, v: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64> {
    let r = w.ncols();
    if v.ncols() != r || h.ncols() != r || w.nrows() != t.n_out() || v.nrows() != t.n_in() || h.nrows() != t.len() {
        return Err(Error::dim("factor shapes do not match the tensor"));
    }
    let den = t.norm_squared();
    if den == 0.0 {
        return Err(Error::ZeroEnergy("Jacobian tensor is identically zero".into()));
    }
    Ok(residual_sq(t, w, v, h) / den)
}

/// Solves `X G = M` for symmetric positive semi-definite `G` (min-norm).
fn solve_gram(m: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    match lstsq(g, &m.transpose(), 1e-15) {
        Ok((x, _)) => x.transpose(),
        Err(_) => m.clone(),
    }
}

fn gaussian_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

/// Second-difference penalty matrix `D₂ᵀD₂` as three diagonals.
fn second_difference_bands(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d0 = vec![0.0; n];
    let mut d1 = vec![0.0; n.saturating_sub(1)];
    let mut d2 = vec![0.0; n.saturating_sub(2)];
    if n < 3 {
        return (d0, d1, d2);
    }
    // rows of D₂ are (1, −2, 1) at columns (j, j+1, j+2)
    for j in 0..n - 2 {
        let c = [1.0, -2.0, 1.0];
        for a in 0..3 {
            d0[j + a] += c[a] * c[a];
            for b in a + 1..3 {
                let off = b - a;
                if off == 1 {
                    d1[j + a] += c[a] * c[b];
                } else {
                    d2[j + a] += c[a] * c[b];
                }
            }
        }
    }
    (d0, d1, d2)
}

struct Run {
    w: DMatrix<f64>,
    v: DMatrix<f64>,
    h: DMatrix<f64>,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn als_run(t: &JacobianTensor, r: usize, opts: &CpdOptions, seed: u64) -> Run {
    let (n_out, n_in, n) = (t.n_out(), t.n_in(), t.len());
    let mut g = rng(seed);
    let mut w = gaussian_matrix(&mut g, n_out, r);
    let mut v = gaussian_matrix(&mut g, n_in, r);
    let mut h = gaussian_matrix(&mut g, n, r);
    let norm2 = t.norm_squared();
    let pts = &t.points.points;
    let bands = (opts.lambda_smooth > 0.0).then(|| second_difference_bands(n));
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut converged = false;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        // W: Σ_k J_k V diag(h_k) = W ((VᵀV) ∘ (HᵀH))
        let gram = (v.transpose() * &v).component_mul(&(h.transpose() * &h));
        let mut mw = DMatrix::zeros(n_out, r);
        for (k, s) in t.slices.iter().enumerate() {
            let sv = s * &v;
            for i in 0..r {
                let hk = h[(k, i)];
                for a in 0..n_out {
                    mw[(a, i)] += hk * sv[(a, i)];
                }
            }
        }
        w = solve_gram(&mw, &gram);
        history.push(residual_sq(t, &w, &v, &h) / norm2);

        // V: Σ_k J_kᵀ W diag(h_k) = V ((WᵀW) ∘ (HᵀH))
        let gram = (w.transpose() * &w).component_mul(&(h.transpose() * &h));
        let mut mv = DMatrix::zeros(n_in, r);
        for (k, s) in t.slices.iter().enumerate() {
            let sw = s.tr_mul(&w);
            for i in 0..r {
                let hk = h[(k, i)];
                for b in 0..n_in {
                    mv[(b, i)] += hk * sw[(b, i)];
                }
            }
        }
        v = solve_gram(&mv, &gram);
        history.push(residual_sq(t, &w, &v, &h) / norm2);

        // H: row k solves ((WᵀW) ∘ (VᵀV)) h_k = diag(Wᵀ J_k V)
        let gram = (w.transpose() * &w).component_mul(&(v.transpose() * &v));
        let mut rhs = DMatrix::zeros(n, r);
        for (k, s) in t.slices.iter().enumerate() {
            let wsv = w.tr_mul(&(s * &v));
            for i in 0..r {
                rhs[(k, i)] = wsv[(i, i)];
            }
        }
        match &bands {
            None => h = solve_gram(&rhs, &gram),
            Some((d0, d1, d2)) => {
                // block Gauss-Seidel over columns, each a pentadiagonal solve
                let lam = opts.lambda_smooth * norm2;
                for i in 0..r {
                    let gii = gram[(i, i)];
                    let z = pts * v.column(i);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| z[a].partial_cmp(&z[b]).unwrap_or(std::cmp::Ordering::Equal));
                    let mut b: Vec<f64> = order
                        .iter()
                        .map(|&k| {
                            let mut s = rhs[(k, i)];
                            for j in 0..r {
                                if j != i {
                                    s -= gram[(i, j)] * h[(k, j)];
                                }
                            }
                            s
                        })
                        .collect();
                    let diag: Vec<f64> = d0.iter().map(|&d| gii + lam * d).collect();
                    let o1: Vec<f64> = d1.iter().map(|&d| lam * d).collect();
                    let o2: Vec<f64> = d2.iter().map(|&d| lam * d).collect();
                    if gii > 0.0 && solve_spd_pentadiagonal(&diag, &o1, &o2, &mut b).is_ok() {
                        for (pos, &k) in order.iter().enumerate() {
                            h[(k, i)] = b[pos];
                        }
                    }
                }
            }
        }
        let obj = residual_sq(t, &w, &v, &h) / norm2;
        history.push(obj);
        normalise(&mut w, &mut v, &mut h);
        if obj < 1e-30 || (prev - obj).abs() <= opts.tol * prev.max(1e-300) {
            converged = true;
            break;
        }
        prev = obj;
    }
    Run { w, v, h, iterations: it, converged, history }
}

/// Unit-norm `V` columns; `W` and `H` columns share the remaining scale.
fn normalise(w: &mut DMatrix<f64>, v: &mut DMatrix<f64>, h: &mut DMatrix<f64>) {
    for i in 0..w.ncols() {
        let nv = v.column(i).norm();
        let nw = w.column(i).norm();
        let nh = h.column(i).norm();
        if nv == 0.0 || nw == 0.0 || nh == 0.0 {
            continue;
        }
        v.column_mut(i).unscale_mut(nv);
        let total = nv * nw * nh;
        let target = total.sqrt();
        w.column_mut(i).scale_mut(target / nw);
        h.column_mut(i).scale_mut(target / nh);
    }
}

/// All restarts, sorted by ascending `e_cpd`.
pub fn cpd_als_all(t: &JacobianTensor, r: usize, opts: &CpdOptions) -> Result<Vec<CpdFactors>> {
    if r == 0 {
        return Err(Error::invalid("rank must be ≥ 1"));
    }
    if t.is_empty() {
        return Err(Error::invalid("empty tensor"));
    }
    let norm2 = t.norm_squared();
    if norm2 == 0.0 {
        return Err(Error::ZeroEnergy("Jacobian tensor is identically zero".into()));
    }
    // a unit-norm copy keeps λ dimensionless and the factors well scaled
    let scale = 1.0 / norm2.sqrt();
    let tn = t.scaled(scale);
    let restarts = opts.restarts.max(1);
    let mut runs: Vec<CpdFactors> = (0..restarts)
        .into_par_iter()
        .map(|i| {
            let run = als_run(&tn, r, opts, child_seed(opts.seed, i as u64));
            let mut w = run.w;
            w /= scale;
            let e = e_cpd(t, &w, &run.v, &run.h).unwrap_or(f64::NAN);
            CpdFactors { w, v: run.v, h: run.h, e_cpd: e, iterations: run.iterations, converged: run.converged, history: run.history }
        })
        .collect();
    runs.sort_by(|a, b| a.e_cpd.partial_cmp(&b.e_cpd).unwrap_or(std::cmp::Ordering::Greater));
    Ok(runs)
}

/// Best of `opts.restarts` seeded runs.
pub fn cpd_als(t: &JacobianTensor, r: usize, opts: &CpdOptions) -> Result<CpdFactors> {
    Ok(cpd_als_all(t, r, opts)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub rank: usize,
    /// `(r, best e_cpd)` for every tried r.
    pub e_cpd: Vec<(usize, f64)>,
    /// True when no r reached the threshold and the elbow was used.
    pub elbow: bool,
}

/// Smallest `r ≤ r_max` with `e_cpd < threshold`, otherwise the `r` after
/// the largest relative drop.
pub fn estimate_rank(t: &JacobianTensor, r_max: usize, threshold: f64, opts: &CpdOptions) -> Result<RankEstimate> {
    let o = CpdOptions { lambda_smooth: 0.0, ..*opts };
    let mut errs = Vec::new();
    for r in 1..=r_max.max(1) {
        let e = cpd_als(t, r, &o)?.e_cpd;
        errs.push((r, e));
        if e < threshold {
            return Ok(RankEstimate { rank: r, e_cpd: errs, elbow: false });
        }
    }
    let mut best = (1, f64::NEG_INFINITY);
    let mut prev = 1.0;
    for &(r, e) in &errs {
        let drop = (prev - e) / prev.max(1e-300);
        if drop > best.1 {
            best = (r, drop);
        }
        prev = e;
    }
    Ok(RankEstimate { rank: best.0, e_cpd: errs, elbow: true })
}

/// Intermediate variables `z = P V` for a set of points (rows).
pub fn intermediate(points: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    points * v
}
