//! Levenberg-Marquardt for generic nonlinear least-squares problems.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// A residual function `r(θ)`; the optimiser minimises `‖r(θ)‖²`.
pub trait LeastSquaresProblem: Sync {
    fn n_params(&self) -> usize;

    /// `None` marks θ as infeasible (e.g. an unstable simulation).
    fn residuals(&self, theta: &[f64]) -> Option<DVector<f64>>;

    /// Jacobian of the residuals. Defaults to parallel forward differences.
    fn jacobian(&self, theta: &[f64], r0: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(fd_jacobian(self, theta, r0, 1e-7, 1e-7))
    }
}

/// Forward-difference Jacobian with step `max(abs, rel·|θ_j|)`, columns in
/// parallel. A column whose forward point is infeasible falls back to a
/// backward difference, then to zero.
pub fn fd_jacobian<P: LeastSquaresProblem + ?Sized>(problem: &P, theta: &[f64], r0: &DVector<f64>, rel: f64, abs: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..theta.len())
        .into_par_iter()
        .map(|j| {
            let h = abs.max(rel * theta[j].abs());
            let mut t = theta.to_vec();
            t[j] += h;
            if let Some(r) = problem.residuals(&t).filter(|r| r.len() == r0.len()) {
                return (r - r0) / h;
            }
            t[j] = theta[j] - h;
            if let Some(r) = problem.residuals(&t).filter(|r| r.len() == r0.len()) {
                return (r0 - r) / h;
            }
            log::warn!("parameter {j}: both finite-difference points infeasible, zero column");
            DVector::zeros(r0.len())
        })
        .collect();
    DMatrix::from_columns(&cols)
}

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub max_iter: usize,
    /// Initial damping relative to the column-scaled normal matrix.
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_max: f64,
    /// Stop when `‖J_sᵀ r‖∞ ≤ grad_tol · ‖r‖²`.
    pub grad_tol: f64,
    /// Stop when `‖δ‖ ≤ step_tol · (‖θ‖ + step_tol)`.
    pub step_tol: f64,
    /// Stop when the relative cost decrease of an accepted step is below this.
    pub cost_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            lambda_init: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            lambda_max: 1e12,
            grad_tol: 1e-14,
            step_tol: 1e-12,
            cost_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIter,
    Gradient,
    Step,
    Cost,
    /// No damping up to `lambda_max` produced a decrease.
    Stalled,
    ZeroCost,
    /// The starting point is infeasible.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct LmIteration {
    pub iter: usize,
    pub cost: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub theta: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub accepted: usize,
    pub termination: Termination,
    pub trace: Vec<LmIteration>,
}

pub fn levenberg_marquardt<P: LeastSquaresProblem + ?Sized>(problem: &P, theta0: &[f64], cfg: &LmConfig) -> LmResult {
    levenberg_marquardt_with(problem, theta0, cfg, |_, _, _, _| {})
}

/// As [`levenberg_marquardt`]; `on_iter(iter, θ, cost, λ)` fires for the
/// starting point and after every accepted step.
pub fn levenberg_marquardt_with<P, F>(problem: &P, theta0: &[f64], cfg: &LmConfig, mut on_iter: F) -> LmResult
where
    P: LeastSquaresProblem + ?Sized,
    F: FnMut(usize, &[f64], f64, f64),
{
    let mut theta = theta0.to_vec();
    let mut lambda = cfg.lambda_init;
    let mut trace = Vec::new();
    let Some(mut r) = problem.residuals(&theta) else {
        return LmResult { theta, cost: f64::INFINITY, iterations: 0, accepted: 0, termination: Termination::Infeasible, trace };
    };
    let mut cost = r.norm_squared();
    trace.push(LmIteration { iter: 0, cost, lambda });
    on_iter(0, &theta, cost, lambda);
    let mut accepted = 0;
    let mut termination = Termination::MaxIter;
    let mut it = 0;
    while it < cfg.max_iter {
        it += 1;
        if cost == 0.0 {
            termination = Termination::ZeroCost;
            break;
        }
        let Some(j) = problem.jacobian(&theta, &r) else {
            termination = Termination::Stalled;
            break;
        };
        let Some(solver) = ScaledStep::new(&j, &r) else {
            termination = Termination::Gradient;
            break;
        };
        if solver.grad_inf <= cfg.grad_tol * cost {
            termination = Termination::Gradient;
            break;
        }
        let mut improved = false;
        let mut small_step = false;
        let mut rel_drop = f64::INFINITY;
        while lambda <= cfg.lambda_max {
            let delta = solver.step(lambda);
            let cand: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            if let Some(rc) = problem.residuals(&cand).filter(|rc| rc.len() == r.len()) {
                let cc = rc.norm_squared();
                if cc.is_finite() && cc < cost {
                    let tn = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
                    small_step = delta.norm() <= cfg.step_tol * (tn + cfg.step_tol);
                    rel_drop = (cost - cc) / cost;
                    theta = cand;
                    r = rc;
                    cost = cc;
                    lambda = (lambda * cfg.lambda_down).max(1e-15);
                    improved = true;
                    break;
                }
            }
            lambda *= cfg.lambda_up;
        }
        if !improved {
            termination = Termination::Stalled;
            break;
        }
        accepted += 1;
        trace.push(LmIteration { iter: it, cost, lambda });
        on_iter(it, &theta, cost, lambda);
        if small_step {
            termination = Termination::Step;
            break;
        }
        if rel_drop < cfg.cost_tol {
            termination = Termination::Cost;
            break;
        }
    }
    LmResult { theta, cost, iterations: it, accepted, termination, trace }
}

/// Damped Gauss-Newton step on the column-scaled Jacobian, factorised once
/// so that λ retries are cheap: `J_s = Q R`, `R = U S Vᵀ`.
struct ScaledStep {
    scale: Vec<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
    // Uᵀ Qᵀ r
    utr: DVector<f64>,
    grad_inf: f64,
}

impl ScaledStep {
    fn new(j: &DMatrix<f64>, r: &DVector<f64>) -> Option<Self> {
        let p = j.ncols();
        let mut js = j.clone();
        let mut scale = vec![1.0; p];
        for (c, sc) in scale.iter_mut().enumerate() {
            let nrm = js.column(c).norm();
            if nrm > 0.0 && nrm.is_finite() {
                *sc = nrm;
                js.column_mut(c).unscale_mut(nrm);
            } else {
                js.column_mut(c).fill(0.0);
            }
        }
        let grad = js.tr_mul(r);
        let grad_inf = grad.amax();
        let (rm, qtr) = if js.nrows() > p {
            let qr = js.qr();
            let mut qtr = r.clone();
            qr.q_tr_mul(&mut qtr);
            let rm = qr.r();
            (rm, qtr.rows(0, p).into_owned())
        } else {
            (js, r.clone())
        };
        let svd = rm.svd(true, true);
        let u = svd.u?;
        let vt = svd.v_t?;
        let utr = u.tr_mul(&qtr);
        Some(Self { scale, s: svd.singular_values, v: vt.transpose(), utr, grad_inf })
    }

    /// Minimiser of `‖r + J δ‖² + λ ‖diag(‖J_c‖) δ‖²`.
    fn step(&self, lambda: f64) -> DVector<f64> {
        let k = self.s.len();
        let mut coef = DVector::zeros(k);
        for i in 0..k {
            let s = self.s[i];
            coef[i] = -s / (s * s + lambda) * self.utr[i];
        }
        let mut d = &self.v.columns(0, k) * coef;
        for (di, sc) in d.iter_mut().zip(&self.scale) {
            *di /= sc;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock as residuals (1 − a, 10 (b − a²)).
    struct Rosen;

    impl LeastSquaresProblem for Rosen {
        fn n_params(&self) -> usize {
            2
        }
        fn residuals(&self, t: &[f64]) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![1.0 - t[0], 10.0 * (t[1] - t[0] * t[0])]))
        }
    }

    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl LeastSquaresProblem for Linear {
        fn n_params(&self) -> usize {
            self.a.ncols()
        }
        fn residuals(&self, t: &[f64]) -> Option<DVector<f64>> {
            Some(&self.b - &self.a * DVector::from_column_slice(t))
        }
        fn jacobian(&self, _t: &[f64], _r: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(-self.a.clone())
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let res = levenberg_marquardt(&Rosen, &[-1.2, 1.0], &LmConfig { max_iter: 200, ..Default::default() });
        assert!((res.theta[0] - 1.0).abs() < 1e-6, "{:?}", res);
        assert!((res.theta[1] - 1.0).abs() < 1e-6);
        for w in res.trace.windows(2) {
            assert!(w[1].cost < w[0].cost);
        }
    }

    #[test]
    fn linear_problem_is_exact() {
        let a = DMatrix::from_fn(30, 3, |i, j| ((i * 7 + j * 3) as f64).sin() * 10f64.powi(j as i32));
        let x = DVector::from_vec(vec![1.0, -0.02, 0.003]);
        let b = &a * &x;
        let res = levenberg_marquardt(&Linear { a, b: b.clone() }, &[0.0; 3], &LmConfig::default());
        assert!(res.cost < 1e-20 * b.norm_squared(), "{}", res.cost);
    }

    #[test]
    fn infeasible_start_reported() {
        struct Bad;
        impl LeastSquaresProblem for Bad {
            fn n_params(&self) -> usize {
                1
            }
            fn residuals(&self, _t: &[f64]) -> Option<DVector<f64>> {
                None
            }
        }
        assert_eq!(levenberg_marquardt(&Bad, &[0.0], &LmConfig::default()).termination, Termination::Infeasible);
    }

    #[test]
    fn fd_jacobian_of_linear_map() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = Linear { a: a.clone(), b: DVector::zeros(2) };
        let r0 = p.residuals(&[0.5, 0.5]).unwrap();
        let j = fd_jacobian(&p, &[0.5, 0.5], &r0, 1e-7, 1e-7);
        assert!((j + a).amax() < 1e-6);
    }
}
