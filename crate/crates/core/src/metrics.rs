//! Output-error metrics.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared simulation error `(1/N) Σ_k ‖y_meas(k) − y(k)‖²`.
pub fn cost_vls(y_meas: &DMatrix<f64>, y_sim: &DMatrix<f64>) -> Result<f64> {
    check_shapes(y_meas, y_sim)?;
    if y_meas.nrows() == 0 {
        return Ok(0.0);
    }
    Ok((y_meas - y_sim).norm_squared() / y_meas.nrows() as f64)
}

/// Relative rms error `sqrt(Σ‖y_meas − y‖² / Σ‖y_meas‖²)`.
pub fn e_rms(y_meas: &DMatrix<f64>, y_sim: &DMatrix<f64>) -> Result<f64> {
    check_shapes(y_meas, y_sim)?;
    let den = y_meas.norm_squared();
    if den == 0.0 {
        return Err(Error::ZeroEnergy("reference signal is identically zero".into()));
    }
    Ok(((y_meas - y_sim).norm_squared() / den).sqrt())
}

/// Root mean square over every entry.
pub fn rms(x: &DMatrix<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.norm_squared() / x.len() as f64).sqrt()
}

/// True iff `max |y_sim| ≤ bound_factor · reference_rms` (inclusive) and
/// every sample is finite.
pub fn stability_guard(y_sim: &DMatrix<f64>, reference_rms: f64, bound_factor: f64) -> bool {
    let bound = bound_factor * reference_rms;
    y_sim.iter().all(|v| v.is_finite() && v.abs() <= bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn vls_examples() {
        let y = DMatrix::from_element(2, 1, 1.0);
        assert_eq!(cost_vls(&y, &y).unwrap(), 0.0);
        assert_eq!(cost_vls(&y, &DMatrix::zeros(2, 1)).unwrap(), 1.0);
        assert!(cost_vls(&y, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn vls_matches_double_loop() {
        let mut r = rng(5);
        let a = DMatrix::from_fn(37, 3, |_, _| r.random::<f64>());
        let b = DMatrix::from_fn(37, 3, |_, _| r.random::<f64>());
        let mut s = 0.0;
        for k in 0..37 {
            let mut row = 0.0;
            for j in 0..3 {
                row += (a[(k, j)] - b[(k, j)]).powi(2);
            }
            s += row;
        }
        assert!((cost_vls(&a, &b).unwrap() - s / 37.0).abs() < 1e-14);
    }

    #[test]
    fn e_rms_examples() {
        let y = DMatrix::from_fn(10, 2, |k, j| (k + j) as f64 - 3.0);
        assert_eq!(e_rms(&y, &y).unwrap(), 0.0);
        assert_eq!(e_rms(&y, &DMatrix::zeros(10, 2)).unwrap(), 1.0);
        assert!(matches!(e_rms(&DMatrix::zeros(3, 1), &DMatrix::zeros(3, 1)), Err(Error::ZeroEnergy(_))));
    }

    #[test]
    fn guard_is_inclusive() {
        let y = DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]);
        assert!(stability_guard(&y, rms(&y), 1e3));
        assert!(stability_guard(&y, 1.0, 2.0));
        assert!(!stability_guard(&y, 1.0, 1.999));
        let bad = DMatrix::from_row_slice(2, 1, &[1.0, f64::INFINITY]);
        assert!(!stability_guard(&bad, 1.0, 1e3));
    }

    proptest! {
        #[test]
        fn e_rms_axioms(seed in 0u64..1000, alpha in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
            let mut r = rng(seed);
            let y = DMatrix::from_fn(20, 2, |_, _| r.random::<f64>() - 0.5);
            let s = DMatrix::from_fn(20, 2, |_, _| r.random::<f64>() - 0.5);
            let e = e_rms(&y, &s).unwrap();
            prop_assert!(e > 0.0);
            let es = e_rms(&(&y * alpha), &(&s * alpha)).unwrap();
            prop_assert!((e - es).abs() < 1e-14 * e.max(1.0));
            prop_assert_eq!(e_rms(&y, &y).unwrap(), 0.0);
        }
    }
}
