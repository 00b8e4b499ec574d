//! Truth systems: discrete Van der Pol, and Bouc-Wen / Duffing oscillators
//! integrated with fixed-step RK4 under a zero-order-hold input.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::poly::{MonomialBasis, PolynomialMap};

/// States larger than this count as diverged.
const DIVERGENCE: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VdpParams {
    pub eps: f64,
    pub omega0: f64,
    pub ts: f64,
}

impl Default for VdpParams {
    fn default() -> Self {
        Self { eps: 0.03, omega0: 2.0 * std::f64::consts::PI, ts: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoucWenParams {
    pub m: f64,
    pub c: f64,
    pub k: f64,
    pub alpha: f64,
    /// Unused by the ν = 1 state-space form; kept for completeness.
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub nu: f64,
}

impl Default for BoucWenParams {
    fn default() -> Self {
        Self { m: 2.0, c: 10.0, k: 5e4, alpha: 5e4, beta: 1e4, gamma: 0.8, delta: -1.1, nu: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingParams {
    pub m: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DuffingParams {
    fn default() -> Self {
        Self { m: 1.0, c: 5.0, alpha: 1e4, beta: 5e9 }
    }
}

/// Output of an ODE generator.
#[derive(Debug, Clone)]
pub struct OdeRun {
    pub dataset: Dataset,
    /// `N × n` continuous states at the sample instants.
    pub states: DMatrix<f64>,
    pub diverged: bool,
}

/// Van der Pol truth model: forward-Euler discretisation with the cross
/// term `−ε T_s x1² x2` in the second state equation.
pub fn vdp_truth_model(p: &VdpParams) -> Result<StateSpaceModel> {
    if !(p.ts > 0.0) {
        return Err(Error::invalid("ts must be positive"));
    }
    let a = DMatrix::from_row_slice(2, 2, &[1.0, p.ts, -p.omega0 * p.omega0 * p.ts, p.eps * p.ts + 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, p.ts]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let d = DMatrix::zeros(1, 1);
    let basis = MonomialBasis::new(2, vec![vec![2, 1]])?;
    let e = PolynomialMap::new(basis, DMatrix::from_row_slice(2, 1, &[0.0, -p.eps * p.ts]))?;
    StateSpaceModel::new(a, b, c, d, Some(e.into()), None, p.ts)
}

/// Runs the Van der Pol recursion directly. Returns the data (with `x0`
/// recorded) and the states; divergence truncates the record.
pub fn simulate_vdp(p: &VdpParams, u: &DMatrix<f64>, x0: Option<[f64; 2]>) -> Result<(OdeRun, StateSpaceModel)> {
    let model = vdp_truth_model(p)?;
    if u.ncols() != 1 {
        return Err(Error::dim("Van der Pol takes a single input"));
    }
    let [mut x1, mut x2] = x0.unwrap_or([0.0, 0.0]);
    let start = DVector::from_vec(vec![x1, x2]);
    let n = u.nrows();
    let mut states = DMatrix::zeros(n, 2);
    let mut valid = n;
    let (ts, w2, eps) = (p.ts, p.omega0 * p.omega0, p.eps);
    for k in 0..n {
        if !(x1.is_finite() && x2.is_finite()) || x1.abs().max(x2.abs()) > DIVERGENCE {
            valid = k;
            break;
        }
        states[(k, 0)] = x1;
        states[(k, 1)] = x2;
        let n1 = x1 + ts * x2;
        let n2 = -w2 * ts * x1 + (eps * ts + 1.0) * x2 + ts * u[(k, 0)] - eps * ts * x1 * x1 * x2;
        x1 = n1;
        x2 = n2;
    }
    let states = states.rows(0, valid).into_owned();
    let y = states.columns(0, 1).into_owned();
    let dataset = Dataset::new(u.rows(0, valid).into_owned(), y, 1.0 / p.ts, Some(start))?;
    Ok((OdeRun { dataset, states, diverged: valid < n }, model))
}

/// Fixed-step RK4 with the input held constant over each sample interval.
/// States are recorded at the sample instants before each update.
pub fn rk4_zoh<F>(rhs: F, x0: &[f64], u: &DMatrix<f64>, fs: f64, oversample: usize) -> Result<(DMatrix<f64>, bool)>
where
    F: Fn(&[f64], &[f64], &mut [f64]),
{
    if oversample == 0 || !(fs > 0.0) {
        return Err(Error::invalid("oversample must be ≥ 1 and fs positive"));
    }
    let n = x0.len();
    let h = 1.0 / (fs * oversample as f64);
    let mut x = x0.to_vec();
    let mut states = DMatrix::zeros(u.nrows(), n);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut uk = vec![0.0; u.ncols()];
    for k in 0..u.nrows() {
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE) {
            return Ok((states.rows(0, k).into_owned(), true));
        }
        for (j, s) in x.iter().enumerate() {
            states[(k, j)] = *s;
        }
        for (j, v) in uk.iter_mut().enumerate() {
            *v = u[(k, j)];
        }
        for _ in 0..oversample {
            rhs(&x, &uk, &mut k1);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            rhs(&tmp, &uk, &mut k2);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            rhs(&tmp, &uk, &mut k3);
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            rhs(&tmp, &uk, &mut k4);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    Ok((states, false))
}

fn ode_run(states: DMatrix<f64>, diverged: bool, u: &DMatrix<f64>, fs: f64) -> Result<OdeRun> {
    let valid = states.nrows();
    let y = states.columns(0, 1).into_owned();
    let dataset = Dataset::new(u.rows(0, valid).into_owned(), y, fs, None)?;
    Ok(OdeRun { dataset, states, diverged })
}

/// Bouc-Wen oscillator with states `[y, ẏ, f_H]`, output `y`.
pub fn simulate_bouc_wen(p: &BoucWenParams, u: &DMatrix<f64>, fs: f64, oversample: usize) -> Result<OdeRun> {
    if !(p.m > 0.0) {
        return Err(Error::invalid("mass must be positive"));
    }
    if p.nu != 1.0 {
        return Err(Error::invalid("only ν = 1 is supported"));
    }
    let p = *p;
    let rhs = move |x: &[f64], u: &[f64], dx: &mut [f64]| {
        dx[0] = x[1];
        dx[1] = (u[0] - p.c * x[1] - p.k * x[0] - x[2]) / p.m;
        dx[2] = p.alpha * x[1] - p.gamma * x[1].abs() * x[2] - p.delta * x[1] * x[2].abs();
    };
    let (states, diverged) = rk4_zoh(rhs, &[0.0; 3], u, fs, oversample)?;
    ode_run(states, diverged, u, fs)
}

/// Duffing oscillator `m ÿ + c ẏ + (α + β y²) y = u`, states `[y, ẏ]`.
pub fn simulate_duffing(p: &DuffingParams, u: &DMatrix<f64>, fs: f64, oversample: usize) -> Result<OdeRun> {
    if !(p.m > 0.0) {
        return Err(Error::invalid("mass must be positive"));
    }
    let p = *p;
    let rhs = move |x: &[f64], u: &[f64], dx: &mut [f64]| {
        dx[0] = x[1];
        dx[1] = (u[0] - p.c * x[1] - p.alpha * x[0] - p.beta * x[0] * x[0] * x[0]) / p.m;
    };
    let (states, diverged) = rk4_zoh(rhs, &[0.0; 2], u, fs, oversample)?;
    ode_run(states, diverged, u, fs)
}

/// Exact zero-order-hold discretisation through the matrix exponential of
/// `[[A, B], [0, 0]] · ts`.
pub fn zoh(ac: &DMatrix<f64>, bc: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (ac.nrows(), bc.ncols());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(ac * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(bc * ts));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Continuous-time linearisation of the Bouc-Wen system around rest.
pub fn bouc_wen_linear(p: &BoucWenParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -p.k / p.m, -p.c / p.m, -1.0 / p.m, 0.0, p.alpha, 0.0]);
    let b = DMatrix::from_row_slice(3, 1, &[0.0, 1.0 / p.m, 0.0]);
    (a, b)
}

pub fn duffing_linear(p: &DuffingParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -p.alpha / p.m, -p.c / p.m]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0 / p.m]);
    (a, b)
}

/// Discrete linear model with `y = x1`, from a continuous `(A, B)` pair.
pub fn discrete_seed(ac: &DMatrix<f64>, bc: &DMatrix<f64>, fs: f64) -> Result<StateSpaceModel> {
    let n = ac.nrows();
    let (a, b) = zoh(ac, bc, 1.0 / fs);
    let mut c = DMatrix::zeros(1, n);
    c[(0, 0)] = 1.0;
    StateSpaceModel::linear(a, b, c, DMatrix::zeros(1, bc.ncols()), 1.0 / fs)
}
