//! One-sided amplitude spectra of sampled signals.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Bin frequencies `k·fs/N` for `k = 0..=N/2`.
    pub freq: Vec<f64>,
    /// `|Y_k| / N` per bin (rows) and channel (columns); a cosine of
    /// amplitude `a` on bin `k` shows `a/2`.
    pub magnitude: DMatrix<f64>,
}

impl Spectrum {
    /// `20 log10` of the magnitude; `-inf` for exact zeros.
    pub fn db(&self) -> DMatrix<f64> {
        self.magnitude.map(|m| 20.0 * m.log10())
    }
}

pub fn spectrum(y: &DMatrix<f64>, fs: f64) -> Result<Spectrum> {
    let n = y.nrows();
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid("fs must be positive"));
    }
    let half = n / 2;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut magnitude = DMatrix::zeros(half + 1, y.ncols());
    for (j, col) in y.column_iter().enumerate() {
        let mut buf: Vec<Complex<f64>> = col.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for k in 0..=half {
            magnitude[(k, j)] = buf[k].norm() / n as f64;
        }
    }
    let freq = (0..=half).map(|k| k as f64 * fs / n as f64).collect();
    Ok(Spectrum { freq, magnitude })
}

/// CSV text with a `freq_hz` column and one `y<j>_db` column per channel.
pub fn to_csv(s: &Spectrum) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["freq_hz".to_string()];
    header.extend((1..=s.magnitude.ncols()).map(|j| format!("y{j}_db")));
    w.write_record(&header)?;
    let db = s.db();
    for (k, f) in s.freq.iter().enumerate() {
        let mut row = vec![format!("{f:.17e}")];
        row.extend(db.row(k).iter().map(|v| format!("{v:.17e}")));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn cosine_on_bin() {
        let n = 256;
        let y = DMatrix::from_fn(n, 1, |k, _| 2.0 * (2.0 * PI * 10.0 * k as f64 / n as f64).cos());
        let s = spectrum(&y, 256.0).unwrap();
        let db = s.db();
        assert!(db[(10, 0)].abs() < 1e-10);
        assert_eq!(s.freq[10], 10.0);
        for k in 0..=n / 2 {
            if k != 10 {
                assert!(db[(k, 0)] < -200.0, "bin {k}: {}", db[(k, 0)]);
            }
        }
    }

    #[test]
    fn zero_signal_is_minus_infinity() {
        let s = spectrum(&DMatrix::zeros(16, 2), 1.0).unwrap();
        assert!(s.db().iter().all(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn parseval() {
        use rand::Rng;
        let mut r = crate::linalg::rng(3);
        for n in [64usize, 65] {
            let y = DMatrix::from_fn(n, 1, |_, _| r.random::<f64>() - 0.5);
            let s = spectrum(&y, 1.0).unwrap();
            let mut e = 0.0;
            for k in 0..s.freq.len() {
                let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
                e += w * (s.magnitude[(k, 0)] * n as f64).powi(2);
            }
            let time = y.norm_squared() * n as f64;
            assert!((e - time).abs() < 1e-10 * time);
        }
    }

    #[test]
    fn csv_has_one_row_per_bin() {
        let y = DMatrix::from_fn(8, 2, |k, j| (k + j) as f64);
        let text = to_csv(&spectrum(&y, 8.0).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "freq_hz,y1_db,y2_db");
        assert_eq!(lines.len(), 1 + 5);
    }
}
