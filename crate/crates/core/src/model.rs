//! Discrete-time polynomial nonlinear state-space models.
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + f_x(x(k), u(k))
//! y(k)   = C x(k) + D u(k) + f_y(x(k), u(k))
//! ```
//!
//! The nonlinear terms take the leading `n_in` entries of `[x; u]`, where
//! `n_in` is either `n` (states only) or `n + m`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::poly::{DecoupledMap, MonomialBasis, PolynomialMap, SparsePoly};

/// Default condition-number cap for state transformations.
pub const TRANSFORM_COND_CAP: f64 = 1e10;

#[derive(Debug, Clone, PartialEq)]
pub enum Nonlinearity {
    Coupled(PolynomialMap),
    Decoupled(DecoupledMap),
}

impl Nonlinearity {
    pub fn n_in(&self) -> usize {
        match self {
            Nonlinearity::Coupled(p) => p.n_in(),
            Nonlinearity::Decoupled(d) => d.n_in(),
        }
    }

    pub fn n_out(&self) -> usize {
        match self {
            Nonlinearity::Coupled(p) => p.n_out(),
            Nonlinearity::Decoupled(d) => d.n_out(),
        }
    }

    pub fn eval(&self, point: &[f64]) -> Result<DVector<f64>> {
        match self {
            Nonlinearity::Coupled(p) => p.eval(point),
            Nonlinearity::Decoupled(d) => d.eval(point),
        }
    }

    pub fn jacobian(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            Nonlinearity::Coupled(p) => p.jacobian(point),
            Nonlinearity::Decoupled(d) => d.jacobian(point),
        }
    }

    pub fn as_decoupled(&self) -> Option<&DecoupledMap> {
        match self {
            Nonlinearity::Decoupled(d) => Some(d),
            Nonlinearity::Coupled(_) => None,
        }
    }

    pub fn as_coupled(&self) -> Option<&PolynomialMap> {
        match self {
            Nonlinearity::Coupled(p) => Some(p),
            Nonlinearity::Decoupled(_) => None,
        }
    }

    fn scratch_len(&self) -> usize {
        match self {
            Nonlinearity::Coupled(p) => p.basis.len(),
            Nonlinearity::Decoupled(d) => d.r(),
        }
    }

    #[inline]
    fn eval_into(&self, point: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        match self {
            Nonlinearity::Coupled(p) => p.eval_into(point, out, scratch),
            Nonlinearity::Decoupled(d) => d.eval_into(point, out, scratch),
        }
    }
}

impl From<PolynomialMap> for Nonlinearity {
    fn from(p: PolynomialMap) -> Self {
        Nonlinearity::Coupled(p)
    }
}

impl From<DecoupledMap> for Nonlinearity {
    fn from(d: DecoupledMap) -> Self {
        Nonlinearity::Decoupled(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub state_nl: Option<Nonlinearity>,
    pub output_nl: Option<Nonlinearity>,
    /// Sample period in seconds; informational only.
    pub ts: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Any |y| above this flags the run unstable and truncates it.
    pub bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { bound: f64::INFINITY }
    }
}

/// Result of a simulation. On instability the traces are truncated to the
/// samples computed before the bound was crossed.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub z_state: Option<DMatrix<f64>>,
    pub z_output: Option<DMatrix<f64>>,
    pub unstable: bool,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        state_nl: Option<Nonlinearity>,
        output_nl: Option<Nonlinearity>,
        ts: f64,
    ) -> Result<Self> {
        let model = Self { a, b, c, d, state_nl, output_nl, ts };
        model.validate()?;
        Ok(model)
    }

    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, ts: f64) -> Result<Self> {
        Self::new(a, b, c, d, None, None, ts)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        if !self.a.is_square() {
            return Err(Error::dim(format!("A is {}x{}", self.a.nrows(), self.a.ncols())));
        }
        if self.b.nrows() != n {
            return Err(Error::dim(format!("B has {} rows, expected {n}", self.b.nrows())));
        }
        if self.c.ncols() != n {
            return Err(Error::dim(format!("C has {} columns, expected {n}", self.c.ncols())));
        }
        if self.d.shape() != (p, m) {
            return Err(Error::dim(format!("D is {:?}, expected ({p}, {m})", self.d.shape())));
        }
        for (name, nl, n_out) in [("state_nl", &self.state_nl, n), ("output_nl", &self.output_nl, p)] {
            if let Some(nl) = nl {
                if nl.n_out() != n_out {
                    return Err(Error::dim(format!("{name} has {} outputs, expected {n_out}", nl.n_out())));
                }
                if nl.n_in() != n && nl.n_in() != n + m {
                    return Err(Error::dim(format!(
                        "{name} takes {} inputs, expected {n} or {}",
                        nl.n_in(),
                        n + m
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same model with both nonlinearities removed.
    pub fn linear_part(&self) -> Self {
        Self { state_nl: None, output_nl: None, ..self.clone() }
    }

    pub fn simulate(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>) -> Result<Simulation> {
        self.simulate_with(u, x0, &SimOptions::default())
    }

    pub fn simulate_with(&self, u: &DMatrix<f64>, x0: Option<&DVector<f64>>, opts: &SimOptions) -> Result<Simulation> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        if u.ncols() != m {
            return Err(Error::dim(format!("input has {} columns, model expects {m}", u.ncols())));
        }
        if let Some(x0) = x0 {
            if x0.len() != n {
                return Err(Error::dim(format!("x0 has {} entries, model has {n} states", x0.len())));
            }
        }
        let big_n = u.nrows();
        let mut y = DMatrix::zeros(big_n, p);
        let mut xs = DMatrix::zeros(big_n, n);
        let r_x = self.state_nl.as_ref().and_then(|s| s.as_decoupled()).map(|d| d.r());
        let r_y = self.output_nl.as_ref().and_then(|s| s.as_decoupled()).map(|d| d.r());
        let mut z_state = r_x.map(|r| DMatrix::zeros(big_n, r));
        let mut z_output = r_y.map(|r| DMatrix::zeros(big_n, r));

        // row-major copies for the inner loop
        let a = row_major(&self.a);
        let b = row_major(&self.b);
        let c = row_major(&self.c);
        let d = row_major(&self.d);

        let mut x: Vec<f64> = x0.map(|v| v.as_slice().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut xn = vec![0.0; n];
        let mut point = vec![0.0; n + m];
        let mut fx = vec![0.0; n];
        let mut fy = vec![0.0; p];
        let mut yk = vec![0.0; p];
        let mut sx = vec![0.0; self.state_nl.as_ref().map_or(0, |s| s.scratch_len())];
        let mut sy = vec![0.0; self.output_nl.as_ref().map_or(0, |s| s.scratch_len())];

        let mut valid = big_n;
        for k in 0..big_n {
            point[..n].copy_from_slice(&x);
            for j in 0..m {
                point[n + j] = u[(k, j)];
            }
            for i in 0..p {
                let mut s = 0.0;
                for j in 0..n {
                    s += c[i * n + j] * x[j];
                }
                for j in 0..m {
                    s += d[i * m + j] * point[n + j];
                }
                yk[i] = s;
            }
            if let Some(nl) = &self.output_nl {
                nl.eval_into(&point[..nl.n_in()], &mut fy, &mut sy);
                for i in 0..p {
                    yk[i] += fy[i];
                }
                if let Some(z) = z_output.as_mut() {
                    for (i, &zi) in sy.iter().enumerate() {
                        z[(k, i)] = zi;
                    }
                }
            }
            if yk.iter().any(|v| !v.is_finite() || v.abs() > opts.bound) {
                valid = k;
                break;
            }
            for i in 0..p {
                y[(k, i)] = yk[i];
            }
            for j in 0..n {
                xs[(k, j)] = x[j];
            }
            if let Some(nl) = &self.state_nl {
                nl.eval_into(&point[..nl.n_in()], &mut fx, &mut sx);
                if let Some(z) = z_state.as_mut() {
                    for (i, &zi) in sx.iter().enumerate() {
                        z[(k, i)] = zi;
                    }
                }
            }
            for i in 0..n {
                let mut s = fx[i];
                for j in 0..n {
                    s += a[i * n + j] * x[j];
                }
                for j in 0..m {
                    s += b[i * m + j] * point[n + j];
                }
                xn[i] = s;
            }
            std::mem::swap(&mut x, &mut xn);
        }
        let unstable = valid < big_n;
        if unstable {
            y = y.rows(0, valid).into_owned();
            xs = xs.rows(0, valid).into_owned();
            z_state = z_state.map(|z| z.rows(0, valid).into_owned());
            z_output = z_output.map(|z| z.rows(0, valid).into_owned());
        }
        Ok(Simulation { y, x: xs, z_state, z_output, unstable })
    }

    /// Similarity transform with `x = T x̃`; the input/output behaviour is
    /// unchanged.
    pub fn apply_state_transform(&self, t: &DMatrix<f64>) -> Result<Self> {
        self.apply_state_transform_capped(t, TRANSFORM_COND_CAP)
    }

    pub fn apply_state_transform_capped(&self, t: &DMatrix<f64>, cond_cap: f64) -> Result<Self> {
        let n = self.n();
        if t.shape() != (n, n) {
            return Err(Error::dim(format!("T is {:?}, expected ({n}, {n})", t.shape())));
        }
        let ti = crate::linalg::checked_inverse(t, cond_cap)?;
        let a = &ti * &self.a * t;
        let b = &ti * &self.b;
        let c = &self.c * t;
        let state_nl = match &self.state_nl {
            Some(nl) => Some(transform_nl(nl, t, Some(&ti), n)?),
            None => None,
        };
        let output_nl = match &self.output_nl {
            Some(nl) => Some(transform_nl(nl, t, None, n)?),
            None => None,
        };
        Ok(Self { a, b, c, d: self.d.clone(), state_nl, output_nl, ts: self.ts })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Composes a nonlinearity's state arguments with `T` and, for the state
/// equation, premultiplies its outputs by `T⁻¹`.
fn transform_nl(nl: &Nonlinearity, t: &DMatrix<f64>, t_inv: Option<&DMatrix<f64>>, n: usize) -> Result<Nonlinearity> {
    match nl {
        Nonlinearity::Decoupled(dm) => {
            let mut v = dm.v.clone();
            let vx = t.transpose() * dm.v.rows(0, n);
            v.rows_mut(0, n).copy_from(&vx);
            let w = match t_inv {
                Some(ti) => ti * &dm.w,
                None => dm.w.clone(),
            };
            Ok(Nonlinearity::Decoupled(DecoupledMap::new(w, v, dm.branches.clone(), dm.unified)?))
        }
        Nonlinearity::Coupled(pm) => {
            let n_in = pm.n_in();
            let subs: Vec<SparsePoly> = (0..n_in)
                .map(|l| {
                    let mut row = vec![0.0; n_in];
                    if l < n {
                        for j in 0..n {
                            row[j] = t[(l, j)];
                        }
                    } else {
                        row[l] = 1.0;
                    }
                    SparsePoly::linear(&row)
                })
                .collect();
            let mut polys: Vec<SparsePoly> = pm.to_sparse().iter().map(|p| p.substitute(&subs)).collect();
            if let Some(ti) = t_inv {
                let mixed = (0..n)
                    .map(|i| {
                        let mut acc = SparsePoly::zero(n_in);
                        for (j, p) in polys.iter().enumerate() {
                            acc.add_scaled(p, ti[(i, j)]);
                        }
                        acc
                    })
                    .collect();
                polys = mixed;
            }
            // keep the original monomial order, append any new ones
            let mut exps: Vec<Vec<u32>> = pm.basis.exponents().to_vec();
            let tol = 1e-14 * pm.coeffs.amax().max(f64::MIN_POSITIVE) * t.amax().max(1.0).powi(pm.basis.max_degree() as i32);
            for p in &polys {
                for (e, c) in &p.terms {
                    if c.abs() > tol && !exps.contains(e) {
                        exps.push(e.clone());
                    }
                }
            }
            let basis = if pm.basis.is_affine() {
                MonomialBasis::new_affine(n_in, exps)?
            } else {
                MonomialBasis::new(n_in, exps)?
            };
            Ok(Nonlinearity::Coupled(PolynomialMap::from_sparse(basis, &polys, tol)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;
    use crate::poly::BranchPolynomial;
    use rand::Rng;

    fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| scale * (r.random::<f64>() - 0.5))
    }

    fn stable_linear(seed: u64) -> StateSpaceModel {
        let mut r = rng(seed);
        let a = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, -0.3, 0.5]);
        StateSpaceModel::linear(a, random_matrix(&mut r, 2, 1, 2.0), random_matrix(&mut r, 1, 2, 2.0), random_matrix(&mut r, 1, 1, 2.0), 1.0)
            .unwrap()
    }

    fn linear_oracle(m: &StateSpaceModel, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DVector::zeros(m.n());
        let mut y = DMatrix::zeros(u.nrows(), m.p());
        for k in 0..u.nrows() {
            let uk = u.row(k).transpose();
            let yk = &m.c * &x + &m.d * &uk;
            y.set_row(k, &yk.transpose());
            x = &m.a * &x + &m.b * &uk;
        }
        y
    }

    #[test]
    fn linear_simulation_matches_oracle() {
        let m = stable_linear(1);
        let mut r = rng(2);
        let u = random_matrix(&mut r, 200, 1, 2.0);
        let sim = m.simulate(&u, None).unwrap();
        assert!((sim.y - linear_oracle(&m, &u)).amax() < 1e-12);
    }

    #[test]
    fn zero_system_gives_zero_output() {
        let m = StateSpaceModel::linear(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2), DMatrix::zeros(2, 1), 1.0).unwrap();
        let u = DMatrix::from_element(10, 1, 3.0);
        assert_eq!(m.simulate(&u, None).unwrap().y.amax(), 0.0);
    }

    #[test]
    fn input_dimension_is_checked() {
        let m = stable_linear(1);
        assert!(m.simulate(&DMatrix::zeros(5, 2), None).is_err());
    }

    #[test]
    fn divergence_flags_and_truncates() {
        let m = StateSpaceModel::linear(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            1.0,
        )
        .unwrap();
        let u = DMatrix::from_element(100, 1, 1.0);
        let sim = m.simulate_with(&u, None, &SimOptions { bound: 1e3 }).unwrap();
        assert!(sim.unstable);
        assert_eq!(sim.y.nrows(), 10);
    }

    #[test]
    fn shape_errors_are_reported() {
        let r = StateSpaceModel::linear(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1), DMatrix::zeros(1, 2), DMatrix::zeros(1, 1), 1.0);
        assert!(r.is_err());
    }

    fn nl_model(decoupled: bool) -> StateSpaceModel {
        let mut m = stable_linear(4);
        if decoupled {
            let w = DMatrix::from_row_slice(2, 2, &[0.1, -0.05, 0.02, 0.08]);
            let v = DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.5, 1.0, 0.2, -0.4]);
            let g = BranchPolynomial::new(2, vec![-0.05, -0.1]);
            m.state_nl = Some(DecoupledMap::new(w, v, vec![g.clone(), g], true).unwrap().into());
        } else {
            let basis = MonomialBasis::full(3, &[2, 3]).unwrap();
            let mut r = rng(9);
            let e = random_matrix(&mut r, 2, basis.len(), 0.05);
            m.state_nl = Some(PolynomialMap::new(basis.clone(), e).unwrap().into());
            let f = random_matrix(&mut r, 1, basis.len(), 0.05);
            m.output_nl = Some(PolynomialMap::new(basis, f).unwrap().into());
        }
        m
    }

    #[test]
    fn identity_transform_is_noop() {
        for dec in [false, true] {
            let m = nl_model(dec);
            let t = m.apply_state_transform(&DMatrix::identity(2, 2)).unwrap();
            assert!((t.a - &m.a).amax() < 1e-15);
            assert!((t.b - &m.b).amax() < 1e-15);
            assert!((t.c - &m.c).amax() < 1e-15);
        }
    }

    #[test]
    fn transform_preserves_outputs_and_z() {
        let mut r = rng(11);
        let u = random_matrix(&mut r, 300, 1, 1.0);
        for dec in [false, true] {
            let m = nl_model(dec);
            let t = DMatrix::from_row_slice(2, 2, &[1.3, -0.4, 0.7, 0.9]);
            let mt = m.apply_state_transform(&t).unwrap();
            let s0 = m.simulate(&u, None).unwrap();
            let s1 = mt.simulate(&u, None).unwrap();
            assert!(!s0.unstable);
            assert!((&s0.y - &s1.y).amax() < 1e-10, "dec={dec}");
            if dec {
                assert!((s0.z_state.unwrap() - s1.z_state.unwrap()).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_transform_rejected() {
        let m = nl_model(true);
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(m.apply_state_transform(&t), Err(Error::Singular(_))));
    }

    #[test]
    fn transform_extends_partial_basis() {
        let mut m = stable_linear(3);
        let basis = MonomialBasis::new(2, vec![vec![2, 1]]).unwrap();
        m.state_nl = Some(PolynomialMap::new(basis, DMatrix::from_row_slice(2, 1, &[0.0, -0.01])).unwrap().into());
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.2, 1.0]);
        let mt = m.apply_state_transform(&t).unwrap();
        assert_eq!(mt.state_nl.as_ref().unwrap().as_coupled().unwrap().basis.len(), 4);
        let u = DMatrix::from_fn(200, 1, |k, _| (k as f64 * 0.3).sin());
        let e = (m.simulate(&u, None).unwrap().y - mt.simulate(&u, None).unwrap().y).amax();
        assert!(e < 1e-12);
    }
}
