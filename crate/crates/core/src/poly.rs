//! Coupled multivariate polynomial maps and their decoupled counterparts.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Set of multivariate monomials, one exponent vector per monomial.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    n_vars: usize,
    exponents: Vec<Vec<u32>>,
    affine: bool,
    // (variable, exponent) pairs with non-zero exponent, per monomial
    terms: Vec<Vec<(usize, u32)>>,
}

impl MonomialBasis {
    /// Basis restricted to monomials of total degree ≥ 2; constant and linear
    /// terms belong to the A, B, C, D matrices.
    pub fn new(n_vars: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        Self::build(n_vars, exponents, false)
    }

    /// Basis that may also hold degree-0 and degree-1 monomials.
    pub fn new_affine(n_vars: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        Self::build(n_vars, exponents, true)
    }

    fn build(n_vars: usize, exponents: Vec<Vec<u32>>, affine: bool) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (j, e) in exponents.iter().enumerate() {
            if e.len() != n_vars {
                return Err(Error::dim(format!(
                    "monomial {j} has {} exponents, expected {n_vars}",
                    e.len()
                )));
            }
            if !affine && e.iter().sum::<u32>() < 2 {
                return Err(Error::invalid(format!(
                    "monomial {j} has total degree < 2; use an affine-inclusive basis"
                )));
            }
            if !seen.insert(e.clone()) {
                return Err(Error::invalid(format!("duplicate monomial {e:?}")));
            }
        }
        let terms = exponents
            .iter()
            .map(|e| {
                e.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0)
                    .map(|(l, &p)| (l, p))
                    .collect()
            })
            .collect();
        Ok(Self { n_vars, exponents, affine, terms })
    }

    /// All monomials in `n_vars` variables with the listed total degrees.
    ///
    /// Ordered by degree, then by descending powers of the leading
    /// variables (x1², x1x2, x2², x1³, …).
    pub fn full(n_vars: usize, degrees: &[u32]) -> Result<Self> {
        let mut degs = degrees.to_vec();
        degs.sort_unstable();
        degs.dedup();
        let mut exps = Vec::new();
        for &d in &degs {
            let mut cur = vec![0u32; n_vars];
            compositions(n_vars, d, 0, &mut cur, &mut exps);
        }
        if degs.iter().any(|&d| d < 2) {
            Self::new_affine(n_vars, exps)
        } else {
            Self::new(n_vars, exps)
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    pub fn max_degree(&self) -> u32 {
        self.exponents.iter().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn min_degree(&self) -> u32 {
        self.exponents.iter().map(|e| e.iter().sum()).min().unwrap_or(0)
    }

    /// Evaluates every monomial at `point`.
    pub fn eval(&self, point: &[f64]) -> Result<DVector<f64>> {
        if point.len() != self.n_vars {
            return Err(Error::dim(format!(
                "point has {} entries, basis expects {}",
                point.len(),
                self.n_vars
            )));
        }
        let mut out = DVector::zeros(self.len());
        self.eval_into(point, out.as_mut_slice());
        Ok(out)
    }

    /// Unchecked evaluation into a caller-provided buffer.
    #[inline]
    pub fn eval_into(&self, point: &[f64], out: &mut [f64]) {
        for (o, terms) in out.iter_mut().zip(&self.terms) {
            let mut v = 1.0;
            for &(l, p) in terms {
                v *= point[l].powi(p as i32);
            }
            *o = v;
        }
    }

    /// Partial derivatives of every monomial: `n_monomials × n_vars`.
    pub fn gradient(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        if point.len() != self.n_vars {
            return Err(Error::dim(format!(
                "point has {} entries, basis expects {}",
                point.len(),
                self.n_vars
            )));
        }
        let mut g = DMatrix::zeros(self.len(), self.n_vars);
        for (j, terms) in self.terms.iter().enumerate() {
            for (t, &(l, p)) in terms.iter().enumerate() {
                // exponent-decrement rule on factor l, others unchanged
                let mut v = p as f64 * point[l].powi(p as i32 - 1);
                for (s, &(l2, p2)) in terms.iter().enumerate() {
                    if s != t {
                        v *= point[l2].powi(p2 as i32);
                    }
                }
                g[(j, l)] = v;
            }
        }
        Ok(g)
    }

    /// True when the span of the basis is mapped into itself by any linear
    /// substitution of the first `n_mixed` variables.
    pub fn closed_under_mixing(&self, n_mixed: usize) -> bool {
        let set: std::collections::BTreeSet<&Vec<u32>> = self.exponents.iter().collect();
        for e in &self.exponents {
            let d: u32 = e[..n_mixed].iter().sum();
            let tail = &e[n_mixed..];
            let mut cur = vec![0u32; n_mixed];
            let mut all = Vec::new();
            compositions(n_mixed, d, 0, &mut cur, &mut all);
            for head in all {
                let mut full = head;
                full.extend_from_slice(tail);
                if !set.contains(&full) {
                    return false;
                }
            }
        }
        true
    }
}

fn compositions(n: usize, d: u32, pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if n == 0 {
        if d == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if pos == n - 1 {
        cur[pos] = d;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for p in (0..=d).rev() {
        cur[pos] = p;
        compositions(n, d - p, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// Coupled polynomial vector function `coeffs · ζ(point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialMap {
    pub basis: MonomialBasis,
    pub coeffs: DMatrix<f64>,
}

impl PolynomialMap {
    pub fn new(basis: MonomialBasis, coeffs: DMatrix<f64>) -> Result<Self> {
        if coeffs.ncols() != basis.len() {
            return Err(Error::dim(format!(
                "coefficient matrix has {} columns, basis has {} monomials",
                coeffs.ncols(),
                basis.len()
            )));
        }
        Ok(Self { basis, coeffs })
    }

    pub fn zeros(basis: MonomialBasis, n_out: usize) -> Self {
        let k = basis.len();
        Self { basis, coeffs: DMatrix::zeros(n_out, k) }
    }

    pub fn n_in(&self) -> usize {
        self.basis.n_vars()
    }

    pub fn n_out(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn eval(&self, point: &[f64]) -> Result<DVector<f64>> {
        let z = self.basis.eval(point)?;
        Ok(&self.coeffs * z)
    }

    /// Analytic Jacobian `n_out × n_in`.
    pub fn jacobian(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        Ok(&self.coeffs * self.basis.gradient(point)?)
    }

    /// Unchecked evaluation; `scratch` must hold at least `basis.len()` entries.
    #[inline]
    pub fn eval_into(&self, point: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let k = self.basis.len();
        self.basis.eval_into(point, &mut scratch[..k]);
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..k {
                s += self.coeffs[(i, j)] * scratch[j];
            }
            *o = s;
        }
    }

    pub(crate) fn to_sparse(&self) -> Vec<SparsePoly> {
        (0..self.n_out())
            .map(|i| {
                let mut p = SparsePoly::zero(self.n_in());
                for (j, e) in self.basis.exponents().iter().enumerate() {
                    p.add_term(e.clone(), self.coeffs[(i, j)]);
                }
                p
            })
            .collect()
    }

    /// Rebuilds a map over `basis` from polynomials, failing if a polynomial
    /// has a term outside the basis.
    pub(crate) fn from_sparse(basis: MonomialBasis, polys: &[SparsePoly], tol: f64) -> Result<Self> {
        let index: BTreeMap<&Vec<u32>, usize> =
            basis.exponents().iter().enumerate().map(|(j, e)| (e, j)).collect();
        let mut coeffs = DMatrix::zeros(polys.len(), basis.len());
        for (i, p) in polys.iter().enumerate() {
            for (e, &c) in &p.terms {
                match index.get(e) {
                    Some(&j) => coeffs[(i, j)] = c,
                    None if c.abs() <= tol => {}
                    None => {
                        return Err(Error::invalid(format!(
                            "monomial {e:?} (coefficient {c:e}) falls outside the basis"
                        )))
                    }
                }
            }
        }
        Self::new(basis, coeffs)
    }
}

/// Univariate polynomial `Σ_k coeffs[k] z^(lowest + k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPolynomial {
    pub lowest: u32,
    pub coeffs: Vec<f64>,
}

impl BranchPolynomial {
    pub fn new(lowest: u32, coeffs: Vec<f64>) -> Self {
        Self { lowest, coeffs }
    }

    pub fn zeros(lowest: u32, degree: u32) -> Result<Self> {
        if degree < lowest {
            return Err(Error::invalid(format!("degree {degree} below lowest power {lowest}")));
        }
        Ok(Self { lowest, coeffs: vec![0.0; (degree - lowest + 1) as usize] })
    }

    /// Highest power; equals `lowest - 1` for an empty coefficient list.
    pub fn degree(&self) -> u32 {
        (self.lowest + self.coeffs.len() as u32).saturating_sub(1)
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        // Horner on the reduced polynomial, then multiply by z^lowest
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * z + c;
        }
        acc * z.powi(self.lowest as i32)
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        let mut s = 0.0;
        for (k, &c) in self.coeffs.iter().enumerate() {
            let p = self.lowest + k as u32;
            if p > 0 {
                s += c * p as f64 * z.powi(p as i32 - 1);
            }
        }
        s
    }
}

/// Decoupled function `W g(Vᵀ p)` with one univariate branch per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledMap {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub branches: Vec<BranchPolynomial>,
    pub unified: bool,
}

impl DecoupledMap {
    pub fn new(w: DMatrix<f64>, v: DMatrix<f64>, branches: Vec<BranchPolynomial>, unified: bool) -> Result<Self> {
        let r = branches.len();
        if w.ncols() != r || v.ncols() != r {
            return Err(Error::dim(format!(
                "W has {} columns, V has {}, but there are {r} branches",
                w.ncols(),
                v.ncols()
            )));
        }
        if unified {
            if let Some(first) = branches.first() {
                if branches.iter().any(|b| b != first) {
                    return Err(Error::invalid("unified map with differing branch polynomials"));
                }
            }
        }
        Ok(Self { w, v, branches, unified })
    }

    pub fn r(&self) -> usize {
        self.branches.len()
    }

    pub fn n_in(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    /// Intermediate variables `z = Vᵀ p`.
    pub fn intermediate(&self, point: &[f64]) -> Result<DVector<f64>> {
        self.check_point(point)?;
        Ok(self.v.tr_mul(&DVector::from_column_slice(point)))
    }

    pub fn eval(&self, point: &[f64]) -> Result<DVector<f64>> {
        self.check_point(point)?;
        let mut out = DVector::zeros(self.n_out());
        let mut z = vec![0.0; self.r()];
        self.eval_into(point, out.as_mut_slice(), &mut z);
        Ok(out)
    }

    /// Unchecked evaluation; leaves the intermediate variables in `z`.
    #[inline]
    pub fn eval_into(&self, point: &[f64], out: &mut [f64], z: &mut [f64]) {
        let n_in = self.n_in();
        for (i, zi) in z.iter_mut().enumerate().take(self.r()) {
            let mut s = 0.0;
            for l in 0..n_in {
                s += self.v[(l, i)] * point[l];
            }
            *zi = s;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..self.r() {
            let g = self.branches[i].eval(z[i]);
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.w[(j, i)] * g;
            }
        }
    }

    /// Analytic Jacobian `W diag(g'(z)) Vᵀ`.
    pub fn jacobian(&self, point: &[f64]) -> Result<DMatrix<f64>> {
        let z = self.intermediate(point)?;
        let mut wd = self.w.clone();
        for i in 0..self.r() {
            let d = self.branches[i].derivative(z[i]);
            wd.column_mut(i).scale_mut(d);
        }
        Ok(wd * self.v.transpose())
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.n_in() {
            return Err(Error::dim(format!(
                "point has {} entries, map expects {}",
                point.len(),
                self.n_in()
            )));
        }
        Ok(())
    }

    /// Expands the branches back into a coupled map over all monomials of the
    /// occurring degrees.
    pub fn to_coupled(&self) -> Result<PolynomialMap> {
        let n_in = self.n_in();
        let mut degrees: Vec<u32> = self
            .branches
            .iter()
            .flat_map(|b| b.lowest..=b.degree())
            .collect();
        degrees.sort_unstable();
        degrees.dedup();
        let basis = MonomialBasis::full(n_in, &degrees)?;
        let mut polys = vec![SparsePoly::zero(n_in); self.n_out()];
        for (i, b) in self.branches.iter().enumerate() {
            let lin = SparsePoly::linear(self.v.column(i).as_slice());
            let mut power = SparsePoly::constant(n_in, 1.0);
            for _ in 0..b.lowest {
                power = power.mul(&lin);
            }
            for &c in &b.coeffs {
                for (j, p) in polys.iter_mut().enumerate() {
                    p.add_scaled(&power, self.w[(j, i)] * c);
                }
                power = power.mul(&lin);
            }
        }
        PolynomialMap::from_sparse(basis, &polys, 0.0)
    }
}

/// Sparse multivariate polynomial keyed by exponent vectors.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SparsePoly {
    pub n_vars: usize,
    pub terms: BTreeMap<Vec<u32>, f64>,
}

impl SparsePoly {
    pub fn zero(n_vars: usize) -> Self {
        Self { n_vars, terms: BTreeMap::new() }
    }

    pub fn constant(n_vars: usize, c: f64) -> Self {
        let mut p = Self::zero(n_vars);
        p.add_term(vec![0; n_vars], c);
        p
    }

    pub fn linear(coeffs: &[f64]) -> Self {
        let n = coeffs.len();
        let mut p = Self::zero(n);
        for (l, &c) in coeffs.iter().enumerate() {
            let mut e = vec![0; n];
            e[l] = 1;
            p.add_term(e, c);
        }
        p
    }

    pub fn add_term(&mut self, e: Vec<u32>, c: f64) {
        if c == 0.0 {
            return;
        }
        *self.terms.entry(e).or_insert(0.0) += c;
    }

    pub fn add_scaled(&mut self, other: &SparsePoly, s: f64) {
        for (e, &c) in &other.terms {
            self.add_term(e.clone(), s * c);
        }
    }

    pub fn mul(&self, other: &SparsePoly) -> SparsePoly {
        let mut out = SparsePoly::zero(self.n_vars);
        for (e1, &c1) in &self.terms {
            for (e2, &c2) in &other.terms {
                let e: Vec<u32> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                out.add_term(e, c1 * c2);
            }
        }
        out
    }

    /// Substitutes variable `l` by the polynomial `subs[l]`.
    pub fn substitute(&self, subs: &[SparsePoly]) -> SparsePoly {
        let n = subs.first().map(|s| s.n_vars).unwrap_or(self.n_vars);
        let mut out = SparsePoly::zero(n);
        for (e, &c) in &self.terms {
            let mut term = SparsePoly::constant(n, c);
            for (l, &p) in e.iter().enumerate() {
                for _ in 0..p {
                    term = term.mul(&subs[l]);
                }
            }
            out.add_scaled(&term, 1.0);
        }
        out
    }
}
