//! Third-order tensor of stacked Jacobians.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::points::OperatingPointSet;
use crate::error::{Error, Result};
use crate::model::Nonlinearity;
use crate::poly::PolynomialMap;

/// `n_out × n_in × N`, stored as `N` frontal slices.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianTensor {
    pub slices: Vec<DMatrix<f64>>,
    pub points: OperatingPointSet,
}

impl JacobianTensor {
    pub fn n_out(&self) -> usize {
        self.slices.first().map_or(0, |s| s.nrows())
    }

    pub fn n_in(&self) -> usize {
        self.slices.first().map_or(0, |s| s.ncols())
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn norm_squared(&self) -> f64 {
        self.slices.iter().map(|s| s.norm_squared()).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { slices: self.slices.iter().map(|m| m * s).collect(), points: self.points.clone() }
    }
}

/// Exact Jacobian of a coupled map at `point`.
pub fn analytic_jacobian(map: &PolynomialMap, point: &[f64]) -> Result<DMatrix<f64>> {
    map.jacobian(point)
}

pub fn build_jacobian_tensor(map: &Nonlinearity, points: &OperatingPointSet) -> Result<JacobianTensor> {
    if points.n_in() != map.n_in() {
        return Err(Error::dim(format!("points have {} coordinates, map takes {}", points.n_in(), map.n_in())));
    }
    let slices: Result<Vec<_>> = (0..points.len()).into_par_iter().map(|k| map.jacobian(&points.row(k))).collect();
    Ok(JacobianTensor { slices: slices?, points: points.clone() })
}
