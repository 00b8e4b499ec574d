//! Input/output records.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × m` input samples.
    pub u: DMatrix<f64>,
    /// `N × p` measured outputs.
    pub y: DMatrix<f64>,
    /// Sample rate in Hz.
    pub fs: f64,
    pub x0: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>, fs: f64, x0: Option<DVector<f64>>) -> Result<Self> {
        if u.nrows() != y.nrows() {
            return Err(Error::dim(format!(
                "input has {} samples, output has {}",
                u.nrows(),
                y.nrows()
            )));
        }
        if !(fs > 0.0) {
            return Err(Error::invalid(format!("sample rate must be positive, got {fs}")));
        }
        Ok(Self { u, y, fs, x0 })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }

    pub fn m(&self) -> usize {
        self.u.ncols()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    /// Rows `start..start+len`; `x0` is dropped unless `start == 0`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::dim(format!("slice {start}+{len} exceeds {} samples", self.len())));
        }
        Ok(Self {
            u: self.u.rows(start, len).into_owned(),
            y: self.y.rows(start, len).into_owned(),
            fs: self.fs,
            x0: if start == 0 { self.x0.clone() } else { None },
        })
    }
}
