//! Random-phase multisine excitation.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{child_seed, rng};

/// Excited harmonic indices ℓ (frequencies ℓ·f0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Lines {
    All { first: usize, last: usize },
    Odd { first: usize, last: usize },
    List { indices: Vec<usize> },
}

impl Lines {
    /// All (or odd) harmonics whose frequency lies in `[f_lo, f_hi]`.
    pub fn band(f_lo: f64, f_hi: f64, f0: f64, odd: bool) -> Self {
        let first = ((f_lo / f0) - 1e-9).ceil().max(1.0) as usize;
        let last = ((f_hi / f0) + 1e-9).floor() as usize;
        if odd {
            Lines::Odd { first, last }
        } else {
            Lines::All { first, last }
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        match self {
            Lines::All { first, last } => (*first..=*last).collect(),
            Lines::Odd { first, last } => (*first..=*last).filter(|l| l % 2 == 1).collect(),
            Lines::List { indices } => indices.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum Amplitude {
    /// Rescale the realisation to this rms.
    Rms(f64),
    /// Per-line amplitude `A`.
    PerLine(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    pub f0: f64,
    pub fs: f64,
    pub lines: Lines,
    pub amplitude: Amplitude,
    pub seed: u64,
    pub periods: usize,
    pub realizations: usize,
}

impl MultisineSpec {
    /// Samples per period `fs / f0`; must be an integer.
    pub fn period_len(&self) -> Result<usize> {
        if !(self.f0 > 0.0 && self.fs > 0.0) {
            return Err(Error::invalid("f0 and fs must be positive"));
        }
        let n = self.fs / self.f0;
        let nr = n.round();
        if (n - nr).abs() > 1e-9 * nr.max(1.0) || nr < 1.0 {
            return Err(Error::invalid(format!("fs/f0 = {n} is not an integer sample count")));
        }
        Ok(nr as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.period_len()?;
        let idx = self.lines.indices();
        if idx.is_empty() {
            return Err(Error::invalid("empty line set"));
        }
        if idx.contains(&0) {
            return Err(Error::invalid("harmonic indices must be positive"));
        }
        let max = *idx.iter().max().unwrap();
        if 2 * max >= n {
            return Err(Error::invalid(format!(
                "line {max} at {} Hz aliases (fs/2 = {} Hz)",
                max as f64 * self.f0,
                self.fs / 2.0
            )));
        }
        if self.periods == 0 || self.realizations == 0 {
            return Err(Error::invalid("periods and realizations must be ≥ 1"));
        }
        Ok(())
    }
}

/// Phases `φ_l ~ U[0, 2π)` of realisation `index`.
pub fn phases(spec: &MultisineSpec, index: usize) -> Vec<f64> {
    let mut r = rng(child_seed(spec.seed, index as u64));
    spec.lines.indices().iter().map(|_| r.random::<f64>() * 2.0 * PI).collect()
}

/// One period per realisation, each an `N × 1` column; `periods` is
/// applied by [`repeat_periods`].
pub fn multisine(spec: &MultisineSpec) -> Result<Vec<DMatrix<f64>>> {
    spec.validate()?;
    let n = spec.period_len()?;
    let idx = spec.lines.indices();
    Ok((0..spec.realizations)
        .into_par_iter()
        .map(|ri| {
            let ph = phases(spec, ri);
            let a = match spec.amplitude {
                Amplitude::PerLine(a) => a,
                Amplitude::Rms(_) => 1.0,
            };
            let mut u = DMatrix::zeros(n, 1);
            for k in 0..n {
                let mut s = 0.0;
                for (&l, &p) in idx.iter().zip(&ph) {
                    // reduce ℓk mod N so the argument stays small
                    let lk = (l * k) % n;
                    s += (2.0 * PI * lk as f64 / n as f64 + p).cos();
                }
                u[(k, 0)] = a * s;
            }
            if let Amplitude::Rms(target) = spec.amplitude {
                let rms = crate::metrics::rms(&u);
                if rms > 0.0 {
                    u *= target / rms;
                }
            }
            u
        })
        .collect())
}

/// Stacks `times` copies of a period.
pub fn repeat_periods(u: &DMatrix<f64>, times: usize) -> DMatrix<f64> {
    let n = u.nrows();
    DMatrix::from_fn(n * times, u.ncols(), |k, j| u[(k % n, j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn spectrum(u: &DMatrix<f64>) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        buf.iter().map(|c| c.norm_sqr()).collect()
    }

    fn vdp_spec() -> MultisineSpec {
        MultisineSpec {
            f0: 0.01,
            fs: 100.0,
            lines: Lines::All { first: 1, last: 400 },
            amplitude: Amplitude::Rms(50.0),
            seed: 7,
            periods: 1,
            realizations: 2,
        }
    }

    #[test]
    fn rms_target_is_met() {
        let u = multisine(&vdp_spec()).unwrap();
        assert_eq!(u.len(), 2);
        for r in &u {
            assert_eq!(r.nrows(), 10_000);
            assert!((crate::metrics::rms(r) - 50.0).abs() < 1e-9);
        }
        assert_ne!(u[0], u[1]);
    }

    #[test]
    fn single_line_is_a_cosine() {
        let mut spec = vdp_spec();
        spec.lines = Lines::List { indices: vec![3] };
        spec.amplitude = Amplitude::PerLine(1.0);
        spec.realizations = 1;
        let u = multisine(&spec).unwrap().remove(0);
        let ph = phases(&spec, 0)[0];
        for k in 0..u.nrows() {
            let t = k as f64 / spec.fs;
            assert!((u[(k, 0)] - (2.0 * PI * 0.03 * t + ph).cos()).abs() < 1e-9);
        }
        assert!(u.amax() <= 1.0 + 1e-12);
    }

    #[test]
    fn energy_only_on_excited_lines() {
        let spec = MultisineSpec {
            f0: 1.0,
            fs: 256.0,
            lines: Lines::Odd { first: 3, last: 41 },
            amplitude: Amplitude::PerLine(1.0),
            seed: 1,
            periods: 1,
            realizations: 1,
        };
        let u = multisine(&spec).unwrap().remove(0);
        let s = spectrum(&u);
        let line_power = s[3];
        for (k, &p) in s.iter().enumerate().take(129) {
            let excited = (3..=41).contains(&k) && k % 2 == 1;
            if excited {
                assert!((p - line_power).abs() < 1e-6 * line_power);
            } else {
                assert!(p < 1e-10 * line_power, "bin {k}: {p}");
            }
        }
    }

    #[test]
    fn periodic_and_deterministic() {
        let spec = vdp_spec();
        let u = multisine(&spec).unwrap();
        let rep = repeat_periods(&u[0], 2);
        for k in 0..10_000 {
            assert_eq!(rep[(k, 0)], rep[(k + 10_000, 0)]);
        }
        assert_eq!(multisine(&spec).unwrap(), u);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = vdp_spec();
        spec.lines = Lines::List { indices: vec![] };
        assert!(multisine(&spec).is_err());
        spec.lines = Lines::All { first: 1, last: 5000 };
        assert!(multisine(&spec).is_err());
        spec.lines = Lines::List { indices: vec![0, 1] };
        assert!(multisine(&spec).is_err());
    }

    #[test]
    fn band_helper() {
        let f0 = 750.0 / 8192.0;
        let idx = Lines::band(5.0, 150.0, f0, false).indices();
        assert!(idx[0] as f64 * f0 >= 5.0 && (idx[0] - 1) as f64 * f0 < 5.0);
        assert!(*idx.last().unwrap() as f64 * f0 <= 150.0);
    }
}
