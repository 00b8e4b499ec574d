//! Decoupling of multivariate polynomial maps into `W g(Vᵀ p)` through a
//! CP decomposition of stacked Jacobians.

pub mod cpd;
pub mod fit;
pub mod points;
pub mod refine;
pub mod tensor;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cpd::{cpd_als, cpd_als_all, e_cpd, estimate_rank, kruskal_ok, CpdFactors, CpdOptions, RankEstimate};
pub use fit::{branch_from_derivative, fit_branches, normalise_v};
pub use points::{column_stats, sample_gaussian, sample_from_record, sample_operating_points, OperatingPointSet, PointSource};
pub use tensor::{analytic_jacobian, build_jacobian_tensor, JacobianTensor};

use crate::error::{Error, Result};
use crate::linalg::{child_seed, rng};
use crate::optim::LmConfig;
use crate::poly::{BranchPolynomial, DecoupledMap, PolynomialMap};
use crate::reduction::{decoupled_outputs, function_error, function_outputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoupleOptions {
    /// Branch count; estimated from the tensor when absent.
    pub r: Option<usize>,
    /// Upper bound for rank estimation, default `min(n_in·n_out, 8)`.
    pub r_max: Option<usize>,
    pub rank_threshold: f64,
    pub lambdas: Vec<f64>,
    pub restarts: usize,
    pub max_iter: usize,
    /// Branch degree, default the map's maximum total degree.
    pub degree: Option<u32>,
    /// Lowest branch power, default the map's minimum total degree.
    pub lowest: Option<u32>,
    /// Refit all branch coefficients jointly after the first `W` refit.
    pub joint: bool,
    /// Number of best candidates refined at function level.
    pub polish: usize,
    pub polish_iter: usize,
    /// Results with `e_f` above this are flagged.
    pub ef_cap: f64,
    pub seed: u64,
}

impl Default for DecoupleOptions {
    fn default() -> Self {
        Self {
            r: None,
            r_max: None,
            rank_threshold: 1e-8,
            lambdas: vec![0.0, 1e-4, 1e-2, 1.0],
            restarts: 5,
            max_iter: 1000,
            degree: None,
            lowest: None,
            joint: true,
            polish: 3,
            polish_iter: 200,
            ef_cap: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lambda: f64,
    pub restart: usize,
    pub e_cpd: f64,
    pub e_f: f64,
    pub polished_e_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupleDiagnostics {
    pub r: usize,
    pub n_points: usize,
    pub rank_estimate: Option<RankEstimate>,
    pub kruskal: bool,
    pub lambda: f64,
    pub e_cpd: f64,
    pub e_f: f64,
    pub per_output_ef: Vec<f64>,
    pub candidates: Vec<Candidate>,
    /// `e_f` above the cap, or a degenerate input.
    pub flagged: bool,
    /// The map is identically zero on the points.
    pub degenerate: bool,
}

fn degenerate_map(n_in: usize, n_out: usize, r: usize, degree: u32, lowest: u32, seed: u64) -> Result<DecoupledMap> {
    use rand::Rng;
    let mut g = rng(seed);
    let mut v = DMatrix::from_fn(n_in, r, |_, _| g.random::<f64>() - 0.5);
    for mut c in v.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c.unscale_mut(n);
        }
    }
    let branches = (0..r).map(|_| BranchPolynomial::zeros(lowest, degree)).collect::<Result<Vec<_>>>()?;
    DecoupledMap::new(DMatrix::zeros(n_out, r), v, branches, false)
}

/// Operating points → Jacobian tensor → CPD over the λ sweep and restarts
/// → branch fits → function-level polish of the best candidates.
pub fn decouple(map: &PolynomialMap, points: &OperatingPointSet, opts: &DecoupleOptions) -> Result<(DecoupledMap, DecoupleDiagnostics)> {
    if points.n_in() != map.n_in() {
        return Err(Error::dim(format!("points have {} coordinates, map takes {}", points.n_in(), map.n_in())));
    }
    if points.len() < 2 {
        return Err(Error::invalid("need at least two operating points"));
    }
    let degree = opts.degree.unwrap_or(map.basis.max_degree()).max(1);
    let lowest = opts.lowest.unwrap_or(map.basis.min_degree()).max(1).min(degree);
    let (n_in, n_out) = (map.n_in(), map.n_out());
    let nl = map.clone().into();
    let q = function_outputs(&nl, &points.points)?;
    let tensor = build_jacobian_tensor(&nl, points)?;
    let base = CpdOptions { max_iter: opts.max_iter, tol: 1e-13, restarts: opts.restarts, seed: opts.seed, lambda_smooth: 0.0 };

    if tensor.norm_squared() == 0.0 {
        let r = opts.r.unwrap_or(1).max(1);
        log::warn!("nonlinearity is zero at every operating point; returning a zero decoupled map");
        let dec = degenerate_map(n_in, n_out, r, degree, lowest, opts.seed)?;
        let rep = function_error(&q, &decoupled_outputs(&dec, &points.points))?;
        let diag = DecoupleDiagnostics {
            r,
            n_points: points.len(),
            rank_estimate: None,
            kruskal: kruskal_ok(n_in, n_out, r),
            lambda: 0.0,
            e_cpd: 0.0,
            e_f: rep.aggregate_ef,
            per_output_ef: rep.per_output_ef,
            candidates: Vec::new(),
            flagged: true,
            degenerate: true,
        };
        return Ok((dec, diag));
    }

    let (r, rank_estimate) = match opts.r {
        Some(r) => (r, None),
        None => {
            let r_max = opts.r_max.unwrap_or((n_in * n_out).min(8));
            let est = estimate_rank(&tensor, r_max, opts.rank_threshold, &base)?;
            (est.rank, Some(est))
        }
    };
    if r == 0 {
        return Err(Error::invalid("r must be ≥ 1"));
    }

    let lambdas = if opts.lambdas.is_empty() { vec![0.0] } else { opts.lambdas.clone() };
    let mut fitted: Vec<(Candidate, Option<DecoupledMap>)> = Vec::new();
    for (li, &lambda) in lambdas.iter().enumerate() {
        let co = CpdOptions { lambda_smooth: lambda, seed: child_seed(opts.seed, li as u64), ..base };
        let runs = cpd_als_all(&tensor, r, &co)?;
        let fits: Vec<_> = runs
            .par_iter()
            .enumerate()
            .map(|(ri, f)| {
                let cand = Candidate { lambda, restart: ri, e_cpd: f.e_cpd, e_f: f64::INFINITY, polished_e_f: None };
                match fit_branches(f, points, degree, lowest, Some(&q), opts.joint) {
                    Ok(dec) => {
                        let e = function_error(&q, &decoupled_outputs(&dec, &points.points)).map(|r| r.aggregate_ef).unwrap_or(f64::INFINITY);
                        (Candidate { e_f: if e.is_finite() { e } else { f64::INFINITY }, ..cand }, Some(dec))
                    }
                    Err(e) => {
                        log::debug!("branch fit failed for λ={lambda}, restart {ri}: {e}");
                        (cand, None)
                    }
                }
            })
            .collect();
        fitted.extend(fits);
    }
    if fitted.iter().all(|(_, d)| d.is_none()) {
        return Err(Error::RankDeficient("no CPD candidate admitted a branch fit".into()));
    }
    let mut order: Vec<usize> = (0..fitted.len()).filter(|&i| fitted[i].1.is_some()).collect();
    order.sort_by(|&a, &b| fitted[a].0.e_f.total_cmp(&fitted[b].0.e_f).then(a.cmp(&b)));

    let cfg = LmConfig { max_iter: opts.polish_iter, ..Default::default() };
    let polished: Vec<(usize, DecoupledMap, f64)> = order
        .iter()
        .take(opts.polish.max(1))
        .copied()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let dec = fitted[i].1.clone().expect("filtered");
            let e0 = fitted[i].0.e_f;
            if opts.polish == 0 || e0 == 0.0 {
                return (i, dec, e0);
            }
            match refine::refine(&dec, &points.points, &q, &cfg) {
                Ok((m, _)) => {
                    let e = function_error(&q, &decoupled_outputs(&m, &points.points)).map(|r| r.aggregate_ef).unwrap_or(f64::INFINITY);
                    if e <= e0 {
                        (i, m, e)
                    } else {
                        (i, dec, e0)
                    }
                }
                Err(_) => (i, dec, e0),
            }
        })
        .collect();
    if opts.polish > 0 {
        for (i, _, e) in &polished {
            fitted[*i].0.polished_e_f = Some(*e);
        }
    }
    let (best_i, best, _) = polished
        .into_iter()
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
        .expect("at least one candidate");
    let dec = normalise_v(&best);
    let rep = function_error(&q, &decoupled_outputs(&dec, &points.points))?;
    let flagged = !(rep.aggregate_ef <= opts.ef_cap);
    if flagged {
        log::warn!("decoupled map has e_f = {:.3e} above the cap {:.3e}", rep.aggregate_ef, opts.ef_cap);
    }
    let chosen = &fitted[best_i].0;
    let diag = DecoupleDiagnostics {
        r,
        n_points: points.len(),
        rank_estimate,
        kruskal: kruskal_ok(n_in, n_out, r),
        lambda: chosen.lambda,
        e_cpd: chosen.e_cpd,
        e_f: rep.aggregate_ef,
        per_output_ef: rep.per_output_ef,
        candidates: fitted.into_iter().map(|(c, _)| c).collect(),
        flagged,
        degenerate: false,
    };
    Ok((dec, diag))
}
