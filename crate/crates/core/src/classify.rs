//! Interpretation of single-branch models: split the branch input `z` into
//! a part proportional to the output and one proportional to its derivative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::model::StateSpaceModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spring,
    Damper,
    Mixed,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyOptions {
    pub conclusive_threshold: f64,
    pub component_threshold: f64,
    /// Adds `ÿ` as a third regressor.
    pub include_acceleration: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self { conclusive_threshold: 0.95, component_threshold: 0.05, include_acceleration: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    /// Unit-norm direction over `[y, ẏ]` (and `ÿ` when requested).
    pub theta_z: Vec<f64>,
    /// Least-squares solution before normalisation.
    pub theta_raw: Vec<f64>,
    /// `1 − rms(z − ẑ) / rms(z)`.
    pub precision: f64,
    pub label: Label,
    pub conclusive_threshold: f64,
    pub component_threshold: f64,
}

/// Central differences scaled by `fs`, one-sided at the ends.
pub fn derivative(y: &[f64], fs: f64) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|k| {
            if k == 0 {
                (y[1] - y[0]) * fs
            } else if k == n - 1 {
                (y[n - 1] - y[n - 2]) * fs
            } else {
                (y[k + 1] - y[k - 1]) * fs / 2.0
            }
        })
        .collect()
}

/// Solves `z ≈ [y ẏ] θ_z` over samples `1..L` (the first sample is dropped).
pub fn decompose_z(z: &[f64], y: &[f64], fs: f64, include_acceleration: bool) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if z.len() != y.len() {
        return Err(Error::dim(format!("z has {} samples, y has {}", z.len(), y.len())));
    }
    if y.len() < 3 {
        return Err(Error::invalid("need at least three samples"));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid("fs must be positive"));
    }
    let dy = derivative(y, fs);
    let ddy = derivative(&dy, fs);
    let cols = if include_acceleration { 3 } else { 2 };
    let rows = y.len() - 1;
    let mut a = DMatrix::from_fn(rows, cols, |k, c| match c {
        0 => y[k + 1],
        1 => dy[k + 1],
        _ => ddy[k + 1],
    });
    let b = DMatrix::from_fn(rows, 1, |k, _| z[k + 1]);
    let scale: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    if scale.iter().any(|&s| s == 0.0) {
        return Err(Error::RankDeficient("a regressor column is identically zero".into()));
    }
    for (j, mut c) in a.column_iter_mut().enumerate() {
        c.unscale_mut(scale[j]);
    }
    let sv = a.clone().svd(false, false).singular_values;
    if sv.min() < 1e-10 * sv.max() {
        return Err(Error::RankDeficient("y and its derivative are collinear".into()));
    }
    let (x, _) = lstsq(&a, &b, 1e-15)?;
    let theta_raw: Vec<f64> = (0..cols).map(|j| x[(j, 0)] / scale[j]).collect();
    let fit = &a * &x;
    let zr = DVector::from_column_slice(&z[1..]);
    let rms_z = zr.norm();
    if rms_z == 0.0 {
        return Err(Error::ZeroEnergy("branch input is identically zero".into()));
    }
    let precision = 1.0 - (&zr - fit.column(0)).norm() / rms_z;
    let nrm = theta_raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let theta_z = theta_raw.iter().map(|v| v / nrm).collect();
    Ok((theta_z, theta_raw, precision))
}

pub fn classify(theta_z: &[f64], precision: f64, opts: &ClassifyOptions) -> Label {
    if !(precision >= opts.conclusive_threshold) || theta_z.len() < 2 {
        return Label::Inconclusive;
    }
    let spring = theta_z[1].abs() < opts.component_threshold;
    let damper = theta_z[0].abs() < opts.component_threshold;
    match (spring, damper) {
        (true, false) => Label::Spring,
        (false, true) => Label::Damper,
        _ => Label::Mixed,
    }
}

pub fn classify_signals(z: &[f64], y: &[f64], fs: f64, opts: &ClassifyOptions) -> Result<ClassificationResult> {
    let (theta_z, theta_raw, precision) = decompose_z(z, y, fs, opts.include_acceleration)?;
    let label = classify(&theta_z, precision, opts);
    Ok(ClassificationResult {
        theta_z,
        theta_raw,
        precision,
        label,
        conclusive_threshold: opts.conclusive_threshold,
        component_threshold: opts.component_threshold,
    })
}

/// Simulates a single-output model whose only decoupled nonlinearity has
/// one branch and classifies that branch. The simulated (not measured)
/// output is used for `y`.
pub fn classify_model(model: &StateSpaceModel, data: &Dataset, opts: &ClassifyOptions) -> Result<ClassificationResult> {
    if model.p() != 1 {
        return Err(Error::invalid("classification needs a single-output model"));
    }
    let branches = |nl: &Option<crate::model::Nonlinearity>| nl.as_ref().and_then(|n| n.as_decoupled()).map(|d| d.r());
    let (rx, ry) = (branches(&model.state_nl), branches(&model.output_nl));
    if model.state_nl.as_ref().is_some_and(|n| n.as_coupled().is_some()) || model.output_nl.as_ref().is_some_and(|n| n.as_coupled().is_some()) {
        return Err(Error::invalid("classification needs decoupled nonlinearities"));
    }
    let sim = model.simulate(&data.u, data.x0.as_ref())?;
    if sim.unstable {
        return Err(Error::Unstable("model diverged on the classification data".into()));
    }
    let z = match (rx, ry) {
        (Some(1), None) => sim.z_state.expect("state branch"),
        (None, Some(1)) => sim.z_output.expect("output branch"),
        _ => return Err(Error::invalid("classification needs exactly one branch in total")),
    };
    let y: Vec<f64> = sim.y.column(0).iter().copied().collect();
    let zc: Vec<f64> = z.column(0).iter().copied().collect();
    classify_signals(&zc, &y, data.fs, opts)
}
