//! Additive white output noise at a prescribed signal-to-noise ratio.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::rng;

/// Adds seeded Gaussian noise to every output channel so that
/// `10 log10(P_signal / P_noise) = snr_db`. An infinite SNR is a no-op.
pub fn add_output_noise(ds: &Dataset, snr_db: f64, seed: u64) -> Result<Dataset> {
    if snr_db == f64::INFINITY {
        return Ok(ds.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    let mut out = ds.clone();
    let mut r = rng(seed);
    let n = ds.len().max(1) as f64;
    for j in 0..ds.p() {
        let power = ds.y.column(j).norm_squared() / n;
        if power == 0.0 {
            return Err(Error::ZeroEnergy(format!("output channel {j} has zero power")));
        }
        let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        for k in 0..ds.len() {
            let e: f64 = r.sample(StandardNormal);
            out.y[(k, j)] += sigma * e;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn unit_power(n: usize) -> Dataset {
        let y = DMatrix::from_fn(n, 1, |k, _| if k % 2 == 0 { 1.0 } else { -1.0 });
        Dataset::new(DMatrix::zeros(n, 1), y, 1.0, None).unwrap()
    }

    #[test]
    fn infinite_snr_is_identity() {
        let ds = unit_power(10);
        assert_eq!(add_output_noise(&ds, f64::INFINITY, 1).unwrap(), ds);
    }

    #[test]
    fn noise_power_matches_snr() {
        let ds = unit_power(100_000);
        let noisy = add_output_noise(&ds, 40.0, 2).unwrap();
        let p = (&noisy.y - &ds.y).norm_squared() / 100_000.0;
        assert!((p - 1e-4).abs() < 0.05 * 1e-4, "{p}");
    }

    #[test]
    fn deterministic_and_checked() {
        let ds = unit_power(100);
        assert_eq!(add_output_noise(&ds, 20.0, 3).unwrap(), add_output_noise(&ds, 20.0, 3).unwrap());
        let zero = Dataset::new(DMatrix::zeros(4, 1), DMatrix::zeros(4, 1), 1.0, None).unwrap();
        assert!(add_output_noise(&zero, 40.0, 1).is_err());
    }
}
