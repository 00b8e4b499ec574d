//! Operating points at which Jacobians are evaluated.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    /// Rows drawn without replacement from a simulated record.
    Sampled,
    /// Independent normal draws matching per-coordinate mean and variance.
    Gaussian,
    /// Supplied by the caller.
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPointSet {
    /// `N × n_in`.
    pub points: DMatrix<f64>,
    pub source: PointSource,
    pub seed: u64,
}

impl OperatingPointSet {
    pub fn explicit(points: DMatrix<f64>) -> Self {
        Self { points, source: PointSource::Explicit, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn n_in(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.points.row(k).iter().copied().collect()
    }
}

/// Per-column mean and (population) variance of a record.
pub fn column_stats(record: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = record.nrows().max(1) as f64;
    let mean = DVector::from_iterator(record.ncols(), record.column_iter().map(|c| c.sum() / n));
    let var = DVector::from_iterator(
        record.ncols(),
        record.column_iter().zip(mean.iter()).map(|(c, &m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n),
    );
    (mean, var)
}

pub fn sample_gaussian(mean: &DVector<f64>, var: &DVector<f64>, n: usize, seed: u64) -> Result<OperatingPointSet> {
    if mean.len() != var.len() {
        return Err(Error::dim("mean and variance lengths differ"));
    }
    if var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("variances must be finite and non-negative"));
    }
    let mut r = rng(seed);
    let d = mean.len();
    let mut points = DMatrix::zeros(n, d);
    for k in 0..n {
        for j in 0..d {
            let e: f64 = r.sample(StandardNormal);
            points[(k, j)] = mean[j] + var[j].sqrt() * e;
        }
    }
    Ok(OperatingPointSet { points, source: PointSource::Gaussian, seed })
}

pub fn sample_from_record(record: &DMatrix<f64>, n: usize, seed: u64) -> Result<OperatingPointSet> {
    if n > record.nrows() {
        return Err(Error::invalid(format!("{n} points requested from a record of {} samples", record.nrows())));
    }
    let mut r = rng(seed);
    let idx = sample(&mut r, record.nrows(), n);
    let mut points = DMatrix::zeros(n, record.ncols());
    for (k, i) in idx.iter().enumerate() {
        points.set_row(k, &record.row(i));
    }
    Ok(OperatingPointSet { points, source: PointSource::Sampled, seed })
}

/// Dispatches on `source` using a record of `[x; u]` samples.
pub fn sample_operating_points(record: &DMatrix<f64>, n: usize, source: PointSource, seed: u64) -> Result<OperatingPointSet> {
    match source {
        PointSource::Sampled => sample_from_record(record, n, seed),
        PointSource::Gaussian => {
            let (m, v) = column_stats(record);
            sample_gaussian(&m, &v, n, seed)
        }
        PointSource::Explicit => Ok(OperatingPointSet::explicit(record.clone())),
    }
}
