//! Flat parameter vector of a state-space model.
//!
//! Layout: `vec(A), vec(B), vec(C), vec(D)`, then `E`, `F` for coupled
//! nonlinearities, then `W_x, W_y, V_x, V_y, θ_x, θ_y` for decoupled ones.
//! `vec` stacks columns. A unified map contributes a single shared θ.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Nonlinearity, StateSpaceModel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: DVector<f64>,
    pub layout: Vec<Segment>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn theta_len(d: &crate::poly::DecoupledMap) -> usize {
    if d.unified {
        d.branches.first().map_or(0, |b| b.coeffs.len())
    } else {
        d.branches.iter().map(|b| b.coeffs.len()).sum()
    }
}

/// Segment layout of `model` without copying values.
pub fn layout(model: &StateSpaceModel) -> Vec<Segment> {
    let mut out = vec![
        Segment { name: "A", len: model.a.len() },
        Segment { name: "B", len: model.b.len() },
        Segment { name: "C", len: model.c.len() },
        Segment { name: "D", len: model.d.len() },
    ];
    let sx = model.state_nl.as_ref();
    let sy = model.output_nl.as_ref();
    if let Some(Nonlinearity::Coupled(p)) = sx {
        out.push(Segment { name: "E", len: p.coeffs.len() });
    }
    if let Some(Nonlinearity::Coupled(p)) = sy {
        out.push(Segment { name: "F", len: p.coeffs.len() });
    }
    let dx = sx.and_then(|s| s.as_decoupled());
    let dy = sy.and_then(|s| s.as_decoupled());
    if let Some(d) = dx {
        out.push(Segment { name: "W_x", len: d.w.len() });
    }
    if let Some(d) = dy {
        out.push(Segment { name: "W_y", len: d.w.len() });
    }
    if let Some(d) = dx {
        out.push(Segment { name: "V_x", len: d.v.len() });
    }
    if let Some(d) = dy {
        out.push(Segment { name: "V_y", len: d.v.len() });
    }
    if let Some(d) = dx {
        out.push(Segment { name: "theta_x", len: theta_len(d) });
    }
    if let Some(d) = dy {
        out.push(Segment { name: "theta_y", len: theta_len(d) });
    }
    out
}

pub fn n_params(model: &StateSpaceModel) -> usize {
    layout(model).iter().map(|s| s.len).sum()
}

pub fn pack(model: &StateSpaceModel) -> ParamVector {
    let layout = layout(model);
    let mut v: Vec<f64> = Vec::with_capacity(layout.iter().map(|s| s.len).sum());
    for mat in [&model.a, &model.b, &model.c, &model.d] {
        v.extend_from_slice(mat.as_slice());
    }
    let sx = model.state_nl.as_ref();
    let sy = model.output_nl.as_ref();
    for nl in [sx, sy] {
        if let Some(Nonlinearity::Coupled(p)) = nl {
            v.extend_from_slice(p.coeffs.as_slice());
        }
    }
    let dx = sx.and_then(|s| s.as_decoupled());
    let dy = sy.and_then(|s| s.as_decoupled());
    for d in [dx, dy].into_iter().flatten() {
        v.extend_from_slice(d.w.as_slice());
    }
    for d in [dx, dy].into_iter().flatten() {
        v.extend_from_slice(d.v.as_slice());
    }
    for d in [dx, dy].into_iter().flatten() {
        if d.unified {
            if let Some(b) = d.branches.first() {
                v.extend_from_slice(&b.coeffs);
            }
        } else {
            for b in &d.branches {
                v.extend_from_slice(&b.coeffs);
            }
        }
    }
    ParamVector { values: DVector::from_vec(v), layout }
}

struct Cursor<'a> {
    data: &'a [f64],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[f64] {
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn fill(&mut self, m: &mut DMatrix<f64>) {
        let n = m.len();
        m.as_mut_slice().copy_from_slice(self.take(n));
    }
}

/// Writes `values` into a copy of `template`.
pub fn unpack(values: &[f64], template: &StateSpaceModel) -> Result<StateSpaceModel> {
    let expected = n_params(template);
    if values.len() != expected {
        return Err(Error::dim(format!(
            "parameter vector has {} entries, model layout needs {expected}",
            values.len()
        )));
    }
    let mut m = template.clone();
    let mut c = Cursor { data: values, pos: 0 };
    c.fill(&mut m.a);
    c.fill(&mut m.b);
    c.fill(&mut m.c);
    c.fill(&mut m.d);
    for nl in [&mut m.state_nl, &mut m.output_nl] {
        if let Some(Nonlinearity::Coupled(p)) = nl {
            c.fill(&mut p.coeffs);
        }
    }
    let mut decs: Vec<&mut crate::poly::DecoupledMap> = Vec::new();
    for nl in [&mut m.state_nl, &mut m.output_nl] {
        if let Some(Nonlinearity::Decoupled(d)) = nl {
            decs.push(d);
        }
    }
    for d in decs.iter_mut() {
        c.fill(&mut d.w);
    }
    for d in decs.iter_mut() {
        c.fill(&mut d.v);
    }
    for d in decs.iter_mut() {
        if d.unified {
            let k = d.branches.first().map_or(0, |b| b.coeffs.len());
            let theta = c.take(k).to_vec();
            for b in d.branches.iter_mut() {
                b.coeffs.copy_from_slice(&theta);
            }
        } else {
            for b in d.branches.iter_mut() {
                let k = b.coeffs.len();
                b.coeffs.copy_from_slice(c.take(k));
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;
    use crate::poly::{BranchPolynomial, DecoupledMap, MonomialBasis, PolynomialMap};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_mat(r: &mut impl Rng, a: usize, b: usize) -> DMatrix<f64> {
        DMatrix::from_fn(a, b, |_, _| r.random::<f64>() - 0.5)
    }

    fn random_model(seed: u64, n: usize, m: usize, p: usize, kind: u8) -> StateSpaceModel {
        let mut r = rng(seed);
        let mut model = StateSpaceModel::linear(rand_mat(&mut r, n, n), rand_mat(&mut r, n, m), rand_mat(&mut r, p, n), rand_mat(&mut r, p, m), 1.0).unwrap();
        let n_in = n + m;
        match kind {
            1 => {
                let basis = MonomialBasis::full(n_in, &[2, 3]).unwrap();
                model.state_nl = Some(PolynomialMap::new(basis.clone(), rand_mat(&mut r, n, basis.len())).unwrap().into());
                model.output_nl = Some(PolynomialMap::new(basis.clone(), rand_mat(&mut r, p, basis.len())).unwrap().into());
            }
            2 => {
                let rx = 1 + (seed % 3) as usize;
                let br: Vec<_> = (0..rx).map(|_| BranchPolynomial::new(2, vec![r.random(), r.random()])).collect();
                model.state_nl = Some(DecoupledMap::new(rand_mat(&mut r, n, rx), rand_mat(&mut r, n_in, rx), br, false).unwrap().into());
                let g = BranchPolynomial::new(3, vec![r.random()]);
                model.output_nl = Some(DecoupledMap::new(rand_mat(&mut r, p, 2), rand_mat(&mut r, n, 2), vec![g.clone(), g], true).unwrap().into());
            }
            _ => {}
        }
        model
    }

    #[test]
    fn duffing_structure_length() {
        let mut model = random_model(1, 2, 1, 1, 0);
        let basis = MonomialBasis::full(2, &[2, 3]).unwrap();
        model.state_nl = Some(PolynomialMap::zeros(basis, 2).into());
        assert_eq!(pack(&model).len(), 4 + 2 + 2 + 1 + 14);
    }

    #[test]
    fn linear_layout_omits_nl_segments() {
        let model = random_model(2, 3, 2, 1, 0);
        let names: Vec<_> = layout(&model).iter().map(|s| s.name).collect();
        assert_eq!(names, ["A", "B", "C", "D"]);
    }

    #[test]
    fn unified_theta_is_shared() {
        let model = random_model(3, 2, 1, 1, 2);
        let pv = pack(&model);
        let seg = pv.layout.iter().find(|s| s.name == "theta_y").unwrap();
        assert_eq!(seg.len, 1);
    }

    #[test]
    fn wrong_length_rejected() {
        let model = random_model(4, 2, 1, 1, 1);
        assert!(unpack(&[0.0; 3], &model).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(seed in 0u64..10_000, n in 1usize..4, m in 1usize..3, p in 1usize..3, kind in 0u8..3) {
            let model = random_model(seed, n, m, p, kind);
            let pv = pack(&model);
            let back = unpack(pv.values.as_slice(), &model).unwrap();
            prop_assert_eq!(&back, &model);
            let mut r = rng(seed + 1);
            let theta: Vec<f64> = (0..pv.len()).map(|_| r.random()).collect();
            let m2 = unpack(&theta, &model).unwrap();
            let repacked = pack(&m2).values;
            prop_assert_eq!(repacked.as_slice(), &theta[..]);
        }
    }
}
