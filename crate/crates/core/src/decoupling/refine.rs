//! Function-level least squares over `(W, V, θ)`: minimises
//! `Σ_k ‖q_k − W g(Vᵀ p_k)‖²` at fixed operating points.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::Result;
use crate::optim::{levenberg_marquardt, LeastSquaresProblem, LmConfig, LmResult};
use crate::poly::{BranchPolynomial, DecoupledMap};

/// `[vec(W), vec(V), θ]`, column-major; a unified map has one θ block.
pub fn pack(dec: &DecoupledMap) -> Vec<f64> {
    let mut out: Vec<f64> = dec.w.iter().chain(dec.v.iter()).copied().collect();
    if dec.unified {
        if let Some(b) = dec.branches.first() {
            out.extend_from_slice(&b.coeffs);
        }
    } else {
        for b in &dec.branches {
            out.extend_from_slice(&b.coeffs);
        }
    }
    out
}

pub fn unpack(theta: &[f64], template: &DecoupledMap) -> Result<DecoupledMap> {
    let (n_out, n_in, r) = (template.n_out(), template.n_in(), template.r());
    let nw = n_out * r;
    let nv = n_in * r;
    let w = DMatrix::from_column_slice(n_out, r, &theta[..nw]);
    let v = DMatrix::from_column_slice(n_in, r, &theta[nw..nw + nv]);
    let mut pos = nw + nv;
    let mut branches: Vec<BranchPolynomial> = Vec::with_capacity(r);
    for (i, b) in template.branches.iter().enumerate() {
        let len = b.coeffs.len();
        if template.unified && i > 0 {
            let shared = branches[0].coeffs.clone();
            branches.push(BranchPolynomial::new(b.lowest, shared));
            continue;
        }
        branches.push(BranchPolynomial::new(b.lowest, theta[pos..pos + len].to_vec()));
        pos += len;
    }
    DecoupledMap::new(w, v, branches, template.unified)
}

pub(crate) struct FunctionProblem<'a> {
    pub template: &'a DecoupledMap,
    pub points: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
}

impl FunctionProblem<'_> {
    fn theta_offsets(&self) -> Vec<usize> {
        let base = (self.template.n_out() + self.template.n_in()) * self.template.r();
        let mut off = Vec::with_capacity(self.template.r());
        let mut pos = base;
        for b in &self.template.branches {
            off.push(pos);
            if !self.template.unified {
                pos += b.coeffs.len();
            }
        }
        off
    }
}

impl LeastSquaresProblem for FunctionProblem<'_> {
    fn n_params(&self) -> usize {
        pack(self.template).len()
    }

    /// Row `k·n_out + j` is `ŷ_kj − q_kj`.
    fn residuals(&self, theta: &[f64]) -> Option<DVector<f64>> {
        let dec = unpack(theta, self.template).ok()?;
        let n_out = dec.n_out();
        let n = self.points.nrows();
        let mut r = DVector::zeros(n * n_out);
        let mut out = vec![0.0; n_out];
        let mut z = vec![0.0; dec.r()];
        for k in 0..n {
            let p: Vec<f64> = self.points.row(k).iter().copied().collect();
            dec.eval_into(&p, &mut out, &mut z);
            for j in 0..n_out {
                r[k * n_out + j] = out[j] - self.q[(k, j)];
            }
        }
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self, theta: &[f64], r0: &DVector<f64>) -> Option<DMatrix<f64>> {
        let dec = unpack(theta, self.template).ok()?;
        let (n_out, n_in, r) = (dec.n_out(), dec.n_in(), dec.r());
        let n = self.points.nrows();
        let np = theta.len();
        let offs = self.theta_offsets();
        let nw = n_out * r;
        let z = self.points * &dec.v;
        let rows: Vec<Vec<(usize, Vec<f64>)>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let mut block = Vec::with_capacity(n_out);
                for j in 0..n_out {
                    let mut row = vec![0.0; np];
                    for i in 0..r {
                        let b = &dec.branches[i];
                        let zi = z[(k, i)];
                        let wji = dec.w[(j, i)];
                        row[i * n_out + j] = b.eval(zi);
                        let dg = wji * b.derivative(zi);
                        for l in 0..n_in {
                            row[nw + i * n_in + l] = dg * self.points[(k, l)];
                        }
                        for d in 0..b.coeffs.len() {
                            row[offs[i] + d] += wji * zi.powi((b.lowest + d as u32) as i32);
                        }
                    }
                    block.push((k * n_out + j, row));
                }
                block
            })
            .collect();
        let mut jac = DMatrix::zeros(r0.len(), np);
        for block in rows {
            for (row, vals) in block {
                for (c, v) in vals.into_iter().enumerate() {
                    jac[(row, c)] = v;
                }
            }
        }
        Some(jac)
    }
}

/// LM over all decoupled parameters starting at `dec`.
pub fn refine(dec: &DecoupledMap, points: &DMatrix<f64>, q: &DMatrix<f64>, cfg: &LmConfig) -> Result<(DecoupledMap, LmResult)> {
    let problem = FunctionProblem { template: dec, points, q };
    let res = levenberg_marquardt(&problem, &pack(dec), cfg);
    Ok((unpack(&res.theta, dec)?, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;
    use crate::optim::fd_jacobian;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sample_map(unified: bool) -> DecoupledMap {
        let b = BranchPolynomial::new(2, vec![0.4, -0.3]);
        let b2 = if unified { b.clone() } else { BranchPolynomial::new(2, vec![-0.1, 0.7]) };
        DecoupledMap::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]),
            DMatrix::from_row_slice(3, 2, &[0.2, 0.9, -0.4, 0.1, 0.6, -0.5]),
            vec![b, b2],
            unified,
        )
        .unwrap()
    }

    #[test]
    fn pack_round_trip() {
        for unified in [false, true] {
            let d = sample_map(unified);
            let t = pack(&d);
            assert_eq!(t.len(), 4 + 6 + if unified { 2 } else { 4 });
            assert_eq!(unpack(&t, &d).unwrap(), d);
        }
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let mut g = rng(3);
        let pts = DMatrix::from_fn(30, 3, |_, _| g.sample::<f64, _>(StandardNormal));
        let q = DMatrix::from_fn(30, 2, |_, _| g.sample::<f64, _>(StandardNormal));
        for unified in [false, true] {
            let d = sample_map(unified);
            let p = FunctionProblem { template: &d, points: &pts, q: &q };
            let t = pack(&d);
            let r0 = p.residuals(&t).unwrap();
            let ja = p.jacobian(&t, &r0).unwrap();
            let jf = fd_jacobian(&p, &t, &r0, 1e-7, 1e-7);
            assert!((&ja - &jf).amax() < 1e-5 * ja.amax(), "unified={unified}");
        }
    }

    #[test]
    fn recovers_perturbed_map() {
        let mut g = rng(4);
        let pts = DMatrix::from_fn(200, 3, |_, _| g.sample::<f64, _>(StandardNormal));
        let truth = sample_map(false);
        let q = DMatrix::from_fn(200, 2, |k, j| truth.eval(&pts.row(k).iter().copied().collect::<Vec<_>>()).unwrap()[j]);
        let mut start = truth.clone();
        start.v[(0, 0)] += 0.05;
        start.branches[1].coeffs[0] += 0.05;
        let (fit, res) = refine(&start, &pts, &q, &LmConfig::default()).unwrap();
        assert!(res.cost < 1e-20, "cost {}", res.cost);
        let p = FunctionProblem { template: &fit, points: &pts, q: &q };
        assert!(p.residuals(&pack(&fit)).unwrap().amax() < 1e-9);
    }
}
