//! Simulation-error minimisation over all model parameters.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{SimOptions, StateSpaceModel};
use crate::optim::{self, LeastSquaresProblem, LmConfig, Termination};
use crate::params;

pub use crate::metrics::stability_guard;

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub lm: LmConfig,
    pub fd_rel: f64,
    pub fd_abs: f64,
    /// Simulations with `max |y| > bound_factor · rms(y_meas)` are unstable.
    pub bound_factor: f64,
    /// Leading samples excluded from the cost.
    pub transient: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self { lm: LmConfig::default(), fd_rel: 1e-7, fd_abs: 1e-7, bound_factor: 1e3, transient: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub v_ls: f64,
    pub lambda: f64,
    pub e_rms_train: f64,
    pub e_rms_val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: StateSpaceModel,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    /// True when no step was accepted.
    pub stalled: bool,
}

/// Simulates `model` on `ds`, starting from the dataset's `x0`.
pub fn simulate_on(model: &StateSpaceModel, ds: &Dataset, bound: f64) -> Result<crate::model::Simulation> {
    model.simulate_with(&ds.u, ds.x0.as_ref(), &SimOptions { bound })
}

/// Relative rms error of `model` on `ds`, skipping `transient` samples.
pub fn e_rms_on(model: &StateSpaceModel, ds: &Dataset, transient: usize, bound_factor: f64) -> Result<f64> {
    let bound = bound_factor * metrics::rms(&ds.y);
    let sim = simulate_on(model, ds, bound)?;
    if sim.unstable {
        return Err(Error::Unstable(format!("output exceeded {bound:.3e}")));
    }
    let t = transient.min(ds.len());
    let rows = ds.len() - t;
    metrics::e_rms(&ds.y.rows(t, rows).into_owned(), &sim.y.rows(t, rows).into_owned())
}

/// Penalised cost used to compare candidate models: mean squared error, or
/// `1e6 ×` the baseline `mean(y_meas²)` when the simulation is unstable.
pub fn penalised_cost(model: &StateSpaceModel, ds: &Dataset, transient: usize, bound_factor: f64) -> Result<f64> {
    let bound = bound_factor * metrics::rms(&ds.y);
    let sim = simulate_on(model, ds, bound)?;
    let t = transient.min(ds.len());
    let rows = ds.len() - t;
    let meas = ds.y.rows(t, rows).into_owned();
    if sim.unstable {
        return Ok(1e6 * metrics::cost_vls(&meas, &DMatrix::zeros(rows, ds.p()))?);
    }
    metrics::cost_vls(&meas, &sim.y.rows(t, rows).into_owned())
}

pub(crate) struct ModelProblem<'a> {
    template: &'a StateSpaceModel,
    data: &'a [Dataset],
    bounds: Vec<f64>,
    transient: usize,
    fd_rel: f64,
    fd_abs: f64,
}

impl<'a> ModelProblem<'a> {
    pub(crate) fn new(template: &'a StateSpaceModel, data: &'a [Dataset], opts: &FinetuneOptions) -> Self {
        let bounds = data.iter().map(|d| opts.bound_factor * metrics::rms(&d.y)).collect();
        Self { template, data, bounds, transient: opts.transient, fd_rel: opts.fd_rel, fd_abs: opts.fd_abs }
    }

    fn n_rows(&self) -> usize {
        self.data.iter().map(|d| d.len().saturating_sub(self.transient) * d.p()).sum()
    }

    /// Stacked simulated outputs (dataset, sample, output order).
    fn outputs(&self, theta: &[f64]) -> Option<DVector<f64>> {
        let model = params::unpack(theta, self.template).ok()?;
        let mut out = Vec::with_capacity(self.n_rows());
        for (ds, &bound) in self.data.iter().zip(&self.bounds) {
            let sim = simulate_on(&model, ds, bound).ok()?;
            if sim.unstable {
                return None;
            }
            for k in self.transient.min(ds.len())..ds.len() {
                for j in 0..ds.p() {
                    out.push(sim.y[(k, j)]);
                }
            }
        }
        Some(DVector::from_vec(out))
    }

    fn measured(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_rows());
        for ds in self.data {
            for k in self.transient.min(ds.len())..ds.len() {
                for j in 0..ds.p() {
                    out.push(ds.y[(k, j)]);
                }
            }
        }
        DVector::from_vec(out)
    }
}

struct Residuals<'a> {
    inner: ModelProblem<'a>,
    meas: DVector<f64>,
}

impl LeastSquaresProblem for Residuals<'_> {
    fn n_params(&self) -> usize {
        params::n_params(self.inner.template)
    }

    fn residuals(&self, theta: &[f64]) -> Option<DVector<f64>> {
        self.inner.outputs(theta).map(|y| &self.meas - y)
    }

    fn jacobian(&self, theta: &[f64], r0: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(optim::fd_jacobian(self, theta, r0, self.inner.fd_rel, self.inner.fd_abs))
    }
}

struct Outputs<'a>(ModelProblem<'a>);

impl LeastSquaresProblem for Outputs<'_> {
    fn n_params(&self) -> usize {
        params::n_params(self.0.template)
    }

    fn residuals(&self, theta: &[f64]) -> Option<DVector<f64>> {
        self.0.outputs(theta)
    }
}

/// Forward-difference Jacobian of the stacked outputs `y(θ)`, rows ordered
/// by sample then output: `N·p × |θ|`.
pub fn output_jacobian(model: &StateSpaceModel, ds: &Dataset, theta: &[f64]) -> Result<DMatrix<f64>> {
    let opts = FinetuneOptions { bound_factor: f64::INFINITY, ..Default::default() };
    let data = std::slice::from_ref(ds);
    let prob = Outputs(ModelProblem::new(model, data, &opts));
    if theta.len() != prob.n_params() {
        return Err(Error::dim(format!("θ has {} entries, model needs {}", theta.len(), prob.n_params())));
    }
    let y0 = prob
        .residuals(theta)
        .ok_or_else(|| Error::Unstable("model diverges at θ".into()))?;
    Ok(optim::fd_jacobian(&prob, theta, &y0, opts.fd_rel, opts.fd_abs))
}

/// Levenberg-Marquardt on `Σ_datasets Σ_k ‖y_meas(k) − y(k)‖²`.
///
/// `validation` is only evaluated for the trace. Fails if the initial model
/// is unstable on the training data.
pub fn levenberg_marquardt(model: &StateSpaceModel, train: &[Dataset], validation: Option<&Dataset>, opts: &FinetuneOptions) -> Result<FinetuneResult> {
    if train.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    for ds in train {
        if ds.m() != model.m() || ds.p() != model.p() {
            return Err(Error::dim(format!(
                "dataset is {}-in/{}-out, model is {}-in/{}-out",
                ds.m(),
                ds.p(),
                model.m(),
                model.p()
            )));
        }
    }
    let inner = ModelProblem::new(model, train, opts);
    let meas = inner.measured();
    let n_samples: usize = train.iter().map(|d| d.len().saturating_sub(opts.transient)).sum();
    let energy = meas.norm_squared();
    let prob = Residuals { inner, meas };
    let theta0 = params::pack(model).values;
    if prob.residuals(theta0.as_slice()).is_none() {
        return Err(Error::Unstable("initial model is unstable on the training data".into()));
    }
    let mut trace = Vec::new();
    let res = optim::levenberg_marquardt_with(&prob, theta0.as_slice(), &opts.lm, |iter, theta, cost, lambda| {
        let e_val = validation.and_then(|v| {
            params::unpack(theta, model)
                .ok()
                .and_then(|m| e_rms_on(&m, v, opts.transient, opts.bound_factor).ok())
        });
        trace.push(TraceRow {
            iter,
            v_ls: cost / n_samples.max(1) as f64,
            lambda,
            e_rms_train: if energy > 0.0 { (cost / energy).sqrt() } else { f64::NAN },
            e_rms_val: e_val,
        });
    });
    log::debug!("finetune: {:?} after {} iterations, {} accepted", res.termination, res.iterations, res.accepted);
    Ok(FinetuneResult {
        model: params::unpack(&res.theta, model)?,
        trace,
        termination: res.termination,
        stalled: res.accepted == 0 && !matches!(res.termination, Termination::ZeroCost | Termination::Gradient),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rng;
    use rand::Rng;

    fn linear_model() -> StateSpaceModel {
        StateSpaceModel::linear(
            DMatrix::from_row_slice(2, 2, &[0.6, 0.3, -0.3, 0.6]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, -0.4]),
            DMatrix::from_element(1, 1, 0.2),
            1.0,
        )
        .unwrap()
    }

    fn dataset(model: &StateSpaceModel, seed: u64, n: usize) -> Dataset {
        let mut r = rng(seed);
        let u = DMatrix::from_fn(n, 1, |_, _| r.random::<f64>() - 0.5);
        let y = model.simulate(&u, None).unwrap().y;
        Dataset::new(u, y, 1.0, None).unwrap()
    }

    #[test]
    fn d_column_equals_input() {
        let m = linear_model();
        let ds = dataset(&m, 1, 100);
        let theta = params::pack(&m).values;
        let j = output_jacobian(&m, &ds, theta.as_slice()).unwrap();
        // D is the 9th parameter (4 + 2 + 2)
        let col = j.column(8);
        for k in 0..100 {
            assert!((col[k] - ds.u[(k, 0)]).abs() < 1e-6);
        }
    }

    #[test]
    fn jacobian_gram_is_psd() {
        let m = linear_model();
        let ds = dataset(&m, 2, 80);
        let j = output_jacobian(&m, &ds, params::pack(&m).values.as_slice()).unwrap();
        let g = j.tr_mul(&j);
        let eig = g.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-10 * g.trace());
    }

    #[test]
    fn recovers_linear_model_from_perturbation() {
        let truth = linear_model();
        let ds = dataset(&truth, 3, 300);
        let mut theta = params::pack(&truth).values;
        let mut r = rng(4);
        for v in theta.iter_mut() {
            *v *= 1.0 + 0.02 * (r.random::<f64>() - 0.5);
        }
        let start = params::unpack(theta.as_slice(), &truth).unwrap();
        let res = levenberg_marquardt(&start, std::slice::from_ref(&ds), Some(&ds), &FinetuneOptions::default()).unwrap();
        let last = res.trace.last().unwrap();
        assert!(last.v_ls < 1e-15 * metrics::rms(&ds.y).powi(2), "{last:?}");
        for w in res.trace.windows(2) {
            assert!(w[1].v_ls < w[0].v_ls);
        }
        assert!(last.e_rms_val.unwrap() < 1e-6);
    }

    #[test]
    fn unstable_start_is_an_error() {
        let mut m = linear_model();
        m.a = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 1.2]);
        let ds = dataset(&linear_model(), 5, 400);
        let r = levenberg_marquardt(&m, std::slice::from_ref(&ds), None, &FinetuneOptions::default());
        assert!(matches!(r, Err(Error::Unstable(_))));
    }
}
