//! Degrees of freedom as the numerical rank of the output-parameter Jacobian.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::StateSpaceModel;
use crate::params;

#[derive(Debug, Clone, Copy)]
pub struct DofOptions {
    pub fd_rel: f64,
    pub fd_abs: f64,
    /// Rank tolerance is `max_dim · tol_factor · eps · σ_max`.
    pub tol_factor: f64,
}

impl Default for DofOptions {
    fn default() -> Self {
        Self { fd_rel: 1e-4, fd_abs: 1e-6, tol_factor: 1e3 }
    }
}

#[derive(Debug, Clone)]
pub struct DofReport {
    pub dof: usize,
    pub n_params: usize,
    pub singular_values: Vec<f64>,
}

/// Fourth-order central-difference output Jacobian on `probe.u` from a zero initial
/// state, columns normalised to unit length before the rank decision.
pub fn jacobian(model: &StateSpaceModel, probe: &Dataset, opts: &DofOptions) -> Result<DMatrix<f64>> {
    let theta = params::pack(model).values;
    let sim = |t: &[f64]| -> Result<DMatrix<f64>> {
        let m = params::unpack(t, model)?;
        let s = m.simulate(&probe.u, None)?;
        if s.unstable {
            return Err(Error::Unstable("probe simulation diverged".into()));
        }
        Ok(s.y)
    };
    sim(theta.as_slice())?;
    let cols: Result<Vec<_>> = (0..theta.len())
        .into_par_iter()
        .map(|j| {
            let h = opts.fd_abs.max(opts.fd_rel * theta[j].abs());
            let at = |s: f64| {
                let mut t = theta.as_slice().to_vec();
                t[j] += s * h;
                sim(&t)
            };
            let d = (at(-2.0)? - at(2.0)? + (at(1.0)? - at(-1.0)?) * 8.0) / (12.0 * h);
            Ok(nalgebra::DVector::from_column_slice(d.transpose().as_slice()))
        })
        .collect();
    Ok(DMatrix::from_columns(&cols?))
}

pub fn count_dof_report(model: &StateSpaceModel, probe: &Dataset, opts: &DofOptions) -> Result<DofReport> {
    let mut j = jacobian(model, probe, opts)?;
    for mut c in j.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c.unscale_mut(n);
        }
    }
    let (dof, sv) = crate::linalg::numerical_rank(&j, opts.tol_factor * f64::EPSILON);
    Ok(DofReport { dof, n_params: j.ncols(), singular_values: sv })
}

pub fn count_dof(model: &StateSpaceModel, probe: &Dataset) -> Result<usize> {
    Ok(count_dof_report(model, probe, &DofOptions::default())?.dof)
}
