//! End-to-end reduction: decouple, optionally unify, then remove branches
//! one at a time, fine-tuning the whole model after every step.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchmarks::{self, discrete_seed, BoucWenParams, DuffingParams, GenerateSpec, System, VdpParams};
use crate::data::Dataset;
use crate::decoupling::{self, sample_operating_points, DecoupleOptions, OperatingPointSet, PointSource};
use crate::dof;
use crate::error::{Error, Result};
use crate::finetune::{self, FinetuneOptions};
use crate::io;
use crate::linalg::child_seed;
use crate::model::{Nonlinearity, SimOptions, StateSpaceModel};
use crate::optim::LmConfig;
use crate::poly::{DecoupledMap, MonomialBasis, PolynomialMap};
use crate::reduction::{self, RemoveOptions, UnifyOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    File { path: PathBuf },
    /// The discrete-time Van der Pol truth model.
    VdpTruth {
        #[serde(default)]
        params: VdpParams,
    },
    /// Linear model from the zero-order-hold discretisation of a benchmark's
    /// linearisation.
    LinearSeed {
        system: System,
        fs: f64,
        #[serde(default)]
        bouc_wen: BoucWenParams,
        #[serde(default)]
        duffing: DuffingParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Files {
        train: Vec<PathBuf>,
        #[serde(default)]
        validation: Option<PathBuf>,
    },
    /// Realisations `0..n_train` train, the next `n_validation` validate.
    Generate {
        spec: GenerateSpec,
        n_train: usize,
        #[serde(default)]
        n_validation: usize,
    },
}

/// Adds coupled polynomial nonlinearities to the starting model and fits
/// them together with the linear part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoupledFit {
    pub state_degrees: Vec<u32>,
    /// Empty means no output nonlinearity.
    pub output_degrees: Vec<u32>,
    /// Monomials over `[x; u]` instead of `x` alone.
    pub include_inputs: bool,
    pub max_iter: usize,
}

impl Default for CoupledFit {
    fn default() -> Self {
        Self { state_degrees: vec![2, 3], output_degrees: vec![], include_inputs: true, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudget {
    pub after_decouple: usize,
    pub after_unify: usize,
    pub after_remove: usize,
}

impl Default for StageBudget {
    fn default() -> Self {
        Self { after_decouple: 100, after_unify: 100, after_remove: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelSource,
    pub data: DataSource,
    pub coupled_fit: Option<CoupledFit>,
    /// Rescales states to unit rms on the training data before the coupled
    /// fit and before decoupling.
    pub normalise_states: bool,
    pub decouple: DecoupleOptions,
    /// Branch counts for the state/output maps; estimated when absent.
    pub r_x: Option<usize>,
    pub r_y: Option<usize>,
    pub n_points: usize,
    pub point_source: PointSource,
    /// Resample operating points from the current model before every step.
    pub refresh_points: bool,
    pub unify: bool,
    pub unify_options: UnifyOptions,
    /// Branch count at which removal stops for the state map.
    pub target_r: usize,
    /// Branch count at which removal stops for the output map.
    pub target_r_y: usize,
    /// Removal stops once the validation (or training) error exceeds this.
    pub stop_threshold: Option<f64>,
    pub remove: RemoveOptions,
    pub finetune: StageBudget,
    pub bound_factor: f64,
    /// Leading samples excluded from every error measure.
    pub transient: usize,
    /// Count degrees of freedom for every record.
    pub dof: bool,
    /// Samples of the first training record used as DOF probe.
    pub dof_probe_len: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::VdpTruth { params: VdpParams::default() },
            data: DataSource::Generate { spec: GenerateSpec::default(), n_train: 4, n_validation: 1 },
            coupled_fit: None,
            normalise_states: false,
            decouple: DecoupleOptions::default(),
            r_x: None,
            r_y: None,
            n_points: 1000,
            point_source: PointSource::Sampled,
            refresh_points: true,
            unify: false,
            unify_options: UnifyOptions::default(),
            target_r: 1,
            target_r_y: 1,
            stop_threshold: None,
            remove: RemoveOptions::default(),
            finetune: StageBudget::default(),
            bound_factor: 1e3,
            transient: 0,
            dof: true,
            dof_probe_len: 2000,
            seed: 0,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_r < 1 || self.target_r_y < 1 {
            return Err(Error::Schema("target_r must be at least 1".into()));
        }
        if let Some(t) = self.stop_threshold {
            if !(t > 0.0) {
                return Err(Error::Schema("stop_threshold must be positive".into()));
            }
        }
        if self.r_x == Some(0) || self.r_y == Some(0) {
            return Err(Error::Schema("branch counts must be at least 1".into()));
        }
        if self.n_points == 0 {
            return Err(Error::Schema("n_points must be positive".into()));
        }
        if !(self.bound_factor > 0.0) {
            return Err(Error::Schema("bound_factor must be positive".into()));
        }
        if self.point_source == PointSource::Explicit {
            return Err(Error::Schema("point_source must be sampled or gaussian".into()));
        }
        match &self.data {
            DataSource::Files { train, .. } if train.is_empty() => Err(Error::Schema("no training files".into())),
            DataSource::Generate { n_train: 0, .. } => Err(Error::Schema("n_train must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Fit,
    Decouple,
    Unify,
    Remove,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    State,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub target: Option<Target>,
    pub r_x: Option<usize>,
    pub r_y: Option<usize>,
    pub e_cpd: Option<f64>,
    pub e_f: Option<f64>,
    pub e_rms_train: f64,
    pub e_rms_val: Option<f64>,
    pub dof: Option<usize>,
    pub model_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub records: Vec<StepRecord>,
    /// Removal halted on the error threshold before the target count.
    pub stopped_early: bool,
    /// Reason for an instability abort.
    pub aborted: Option<String>,
    /// Index into `records` of the returned model.
    pub final_record: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: ReductionReport,
    /// Last model that was stable and within the threshold.
    pub model: StateSpaceModel,
}

pub fn load_data(src: &DataSource) -> Result<(Vec<Dataset>, Option<Dataset>)> {
    match src {
        DataSource::Files { train, validation } => {
            let t = train.iter().map(|p| io::load_dataset(p)).collect::<Result<Vec<_>>>()?;
            let v = validation.as_ref().map(|p| io::load_dataset(p)).transpose()?;
            Ok((t, v))
        }
        DataSource::Generate { spec, n_train, n_validation } => {
            let mut spec = spec.clone();
            spec.realizations = n_train + n_validation;
            let mut all = benchmarks::generate(&spec)?;
            let val = all.split_off(*n_train);
            Ok((all, val.into_iter().next()))
        }
    }
}

pub fn initial_model(src: &ModelSource) -> Result<StateSpaceModel> {
    match src {
        ModelSource::File { path } => io::load_model(path),
        ModelSource::VdpTruth { params } => benchmarks::vdp_truth_model(params),
        ModelSource::LinearSeed { system, fs, bouc_wen, duffing } => {
            let (ac, bc) = match system {
                System::BoucWen => benchmarks::bouc_wen_linear(bouc_wen),
                System::Duffing => benchmarks::duffing_linear(duffing),
                System::Vdp => return Err(Error::Schema("linear_seed supports bouc_wen and duffing".into())),
            };
            discrete_seed(&ac, &bc, *fs)
        }
    }
}

/// Relative rms error pooled over several records.
pub fn pooled_e_rms(model: &StateSpaceModel, data: &[Dataset], transient: usize, bound_factor: f64) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ds in data {
        let bound = bound_factor * crate::metrics::rms(&ds.y);
        let sim = finetune::simulate_on(model, ds, bound)?;
        if sim.unstable {
            return Err(Error::Unstable(format!("output exceeded {bound:.3e}")));
        }
        let t = transient.min(ds.len());
        let rows = ds.len() - t;
        num += (ds.y.rows(t, rows) - sim.y.rows(t, rows)).norm_squared();
        den += ds.y.rows(t, rows).norm_squared();
    }
    if den == 0.0 {
        return Err(Error::ZeroEnergy("measured outputs are zero".into()));
    }
    Ok((num / den).sqrt())
}

/// `[x; u]` rows of the simulated training records after the transient.
pub fn state_input_record(model: &StateSpaceModel, data: &[Dataset], transient: usize, n_in: usize) -> Result<DMatrix<f64>> {
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0;
    for ds in data {
        let sim = model.simulate_with(&ds.u, ds.x0.as_ref(), &SimOptions::default())?;
        if sim.unstable {
            return Err(Error::Unstable("simulation diverged while sampling operating points".into()));
        }
        let n = model.n();
        for k in transient.min(ds.len())..ds.len() {
            for j in 0..n_in {
                rows.push(if j < n { sim.x[(k, j)] } else { ds.u[(k, j - n)] });
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no samples left after the transient"));
    }
    Ok(DMatrix::from_row_slice(count, n_in, &rows))
}

fn branch_count(nl: &Option<Nonlinearity>) -> Option<usize> {
    nl.as_ref().and_then(|n| n.as_decoupled()).map(|d| d.r())
}

fn nl_of(model: &StateSpaceModel, t: Target) -> &Option<Nonlinearity> {
    match t {
        Target::State => &model.state_nl,
        Target::Output => &model.output_nl,
    }
}

fn with_nl(model: &StateSpaceModel, t: Target, nl: Nonlinearity) -> StateSpaceModel {
    let mut m = model.clone();
    match t {
        Target::State => m.state_nl = Some(nl),
        Target::Output => m.output_nl = Some(nl),
    }
    m
}

fn coupled_basis(n: usize, m: usize, degrees: &[u32], include_inputs: bool) -> Result<MonomialBasis> {
    MonomialBasis::full(if include_inputs { n + m } else { n }, degrees)
}

/// Unit-rms state scaling measured on the training records.
fn normalise_states(model: &StateSpaceModel, data: &[Dataset], transient: usize) -> Result<StateSpaceModel> {
    let n = model.n();
    let rec = state_input_record(model, data, transient, n)?;
    let scale = DVector::from_iterator(
        n,
        rec.column_iter().map(|c| {
            let s = (c.norm_squared() / c.len() as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        }),
    );
    model.apply_state_transform(&DMatrix::from_diagonal(&scale))
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    train: Vec<Dataset>,
    val: Option<Dataset>,
    probe: Option<Dataset>,
    report: ReductionReport,
    good: StateSpaceModel,
    stage_counter: u64,
}

struct Metrics {
    train: f64,
    val: Option<f64>,
}

impl<'a> Runner<'a> {
    fn metrics(&self, model: &StateSpaceModel) -> Result<Metrics> {
        let train = pooled_e_rms(model, &self.train, self.cfg.transient, self.cfg.bound_factor)?;
        let val = match &self.val {
            Some(v) => Some(pooled_e_rms(model, std::slice::from_ref(v), self.cfg.transient, self.cfg.bound_factor)?),
            None => None,
        };
        Ok(Metrics { train, val })
    }

    fn next_seed(&mut self) -> u64 {
        self.stage_counter += 1;
        child_seed(self.cfg.seed, self.stage_counter)
    }

    /// Appends a record and persists the model. The model becomes the last
    /// good one.
    fn record(&mut self, stage: Stage, target: Option<Target>, model: &StateSpaceModel, e_cpd: Option<f64>, e_f: Option<f64>) -> Result<Metrics> {
        let met = self.metrics(model)?;
        let dof = match &self.probe {
            Some(p) => Some(dof::count_dof(model, p)?),
            None => None,
        };
        let idx = self.report.records.len();
        let model_file = match &self.cfg.output_dir {
            Some(dir) => {
                let name = format!("step_{idx:02}_{}.json", stage_name(stage));
                io::save_model(&dir.join(&name), model)?;
                Some(name)
            }
            None => None,
        };
        log::info!(
            "{:?} {:?}: r_x={:?} r_y={:?} e_rms_train={:.3e} e_rms_val={:?}",
            stage,
            target,
            branch_count(&model.state_nl),
            branch_count(&model.output_nl),
            met.train,
            met.val
        );
        self.report.records.push(StepRecord {
            stage,
            target,
            r_x: branch_count(&model.state_nl),
            r_y: branch_count(&model.output_nl),
            e_cpd,
            e_f,
            e_rms_train: met.train,
            e_rms_val: met.val,
            dof,
            model_file,
        });
        self.report.final_record = idx;
        self.good = model.clone();
        Ok(met)
    }

    fn finetune(&mut self, model: &StateSpaceModel, max_iter: usize, target: Option<Target>, stage: Stage) -> Result<(StateSpaceModel, Metrics)> {
        if max_iter == 0 {
            let met = self.metrics(model)?;
            return Ok((model.clone(), met));
        }
        let opts = FinetuneOptions {
            lm: LmConfig { max_iter, ..Default::default() },
            bound_factor: self.cfg.bound_factor,
            transient: self.cfg.transient,
            ..Default::default()
        };
        let res = finetune::levenberg_marquardt(model, &self.train, self.val.as_ref(), &opts)?;
        let met = self.record(stage, target, &res.model, None, None)?;
        Ok((res.model, met))
    }

    fn points(&mut self, model: &StateSpaceModel, n_in: usize) -> Result<OperatingPointSet> {
        let rec = state_input_record(model, &self.train, self.cfg.transient, n_in)?;
        let seed = self.next_seed();
        sample_operating_points(&rec, self.cfg.n_points.min(rec.nrows()), self.cfg.point_source, seed)
    }

    fn decouple_target(&mut self, model: StateSpaceModel, t: Target) -> Result<Option<StateSpaceModel>> {
        let map = match nl_of(&model, t) {
            Some(Nonlinearity::Coupled(p)) => p.clone(),
            _ => return Ok(Some(model)),
        };
        let mut pts = self.points(&model, map.n_in())?;
        let opts = DecoupleOptions {
            r: match t {
                Target::State => self.cfg.r_x,
                Target::Output => self.cfg.r_y,
            }
            .or(self.cfg.decouple.r),
            seed: self.next_seed(),
            ..self.cfg.decouple.clone()
        };
        let (dec, diag) = decoupling::decouple(&map, &pts, &opts)?;
        if diag.flagged {
            log::warn!("{t:?} decoupling flagged: e_f = {:.3e}", diag.e_f);
        }
        let mut model = with_nl(&model, t, Nonlinearity::Decoupled(dec));
        self.record(Stage::Decouple, Some(t), &model, Some(diag.e_cpd), Some(diag.e_f))?;
        model = self.finetune(&model, self.cfg.finetune.after_decouple, Some(t), Stage::Finetune)?.0;

        if self.cfg.unify {
            if self.cfg.refresh_points {
                pts = self.points(&model, map.n_in())?;
            }
            let dec = nl_of(&model, t).as_ref().and_then(|n| n.as_decoupled()).expect("decoupled").clone();
            let res = reduction::unify_branches(&dec, &pts.points, &self.cfg.unify_options)?;
            model = with_nl(&model, t, Nonlinearity::Decoupled(res.map));
            self.record(Stage::Unify, Some(t), &model, None, Some(res.report.aggregate_ef))?;
            model = self.finetune(&model, self.cfg.finetune.after_unify, Some(t), Stage::Finetune)?.0;
        }

        let target_r = match t {
            Target::State => self.cfg.target_r,
            Target::Output => self.cfg.target_r_y,
        };
        loop {
            let dec = nl_of(&model, t).as_ref().and_then(|n| n.as_decoupled()).expect("decoupled").clone();
            if dec.r() <= target_r {
                return Ok(Some(model));
            }
            if self.cfg.refresh_points {
                pts = self.points(&model, map.n_in())?;
            }
            // a removal whose simulation diverges falls back to the next-best branch
            let mut allowed: Vec<usize> = (0..dec.r()).collect();
            let (res, candidate) = loop {
                let res = reduction::remove_branch_among(&dec, &pts.points, &self.cfg.remove, &allowed)?;
                let candidate = with_nl(&model, t, Nonlinearity::Decoupled(res.map.clone()));
                match self.metrics(&candidate) {
                    Err(Error::Unstable(msg)) if allowed.len() > 1 => {
                        log::warn!("removing branch {} diverges ({msg}); trying another", res.removed_index);
                        allowed.retain(|&c| c != res.removed_index);
                    }
                    _ => break (res, candidate),
                }
            };
            let kept = self.good.clone();
            let kept_record = self.report.final_record;
            self.record(Stage::Remove, Some(t), &candidate, None, Some(res.report.aggregate_ef))?;
            let (tuned, met) = self.finetune(&candidate, self.cfg.finetune.after_remove, Some(t), Stage::Finetune)?;
            if let Some(th) = self.cfg.stop_threshold {
                let e = met.val.unwrap_or(met.train);
                if e > th {
                    log::info!("error {e:.3e} above threshold {th:.3e}; keeping r = {}", dec.r());
                    self.good = kept;
                    self.report.final_record = kept_record;
                    self.report.stopped_early = true;
                    return Ok(None);
                }
            }
            model = tuned;
        }
    }

    fn run(&mut self, model: StateSpaceModel) -> Result<()> {
        let mut model = model;
        self.record(Stage::Initial, None, &model, None, None)?;

        if let Some(fit) = self.cfg.coupled_fit.clone() {
            if self.cfg.normalise_states {
                model = normalise_states(&model, &self.train, self.cfg.transient)?;
            }
            let (n, m, p) = (model.n(), model.m(), model.p());
            if !fit.state_degrees.is_empty() {
                let b = coupled_basis(n, m, &fit.state_degrees, fit.include_inputs)?;
                model.state_nl = Some(Nonlinearity::Coupled(PolynomialMap::zeros(b, n)));
            }
            if !fit.output_degrees.is_empty() {
                let b = coupled_basis(n, m, &fit.output_degrees, fit.include_inputs)?;
                model.output_nl = Some(Nonlinearity::Coupled(PolynomialMap::zeros(b, p)));
            }
            model = self.finetune(&model, fit.max_iter, None, Stage::Fit)?.0;
        }
        if self.cfg.normalise_states {
            model = normalise_states(&model, &self.train, self.cfg.transient)?;
        }

        // output map first: fewer parameters to tune while the state map is reduced
        for t in [Target::Output, Target::State] {
            match self.decouple_target(model, t)? {
                Some(m) => model = m,
                None => return Ok(()),
            }
        }
        Ok(())
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Initial => "initial",
        Stage::Fit => "fit",
        Stage::Decouple => "decouple",
        Stage::Unify => "unify",
        Stage::Remove => "remove",
        Stage::Finetune => "finetune",
    }
}

/// Runs the configured reduction. Instability during any stage ends the
/// run with `report.aborted` set and the last good model returned; other
/// failures are errors.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (train, val) = load_data(&cfg.data)?;
    let model = initial_model(&cfg.model)?;
    run_pipeline_with(cfg, model, train, val)
}

pub fn run_pipeline_with(cfg: &PipelineConfig, model: StateSpaceModel, train: Vec<Dataset>, val: Option<Dataset>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    for ds in train.iter().chain(val.iter()) {
        if ds.m() != model.m() || ds.p() != model.p() {
            return Err(Error::dim(format!("dataset is {}-in/{}-out, model is {}-in/{}-out", ds.m(), ds.p(), model.m(), model.p())));
        }
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
    }
    // initial stability is a precondition, not an abort
    pooled_e_rms(&model, &train, cfg.transient, cfg.bound_factor)?;
    let probe = if cfg.dof { Some(train[0].slice(0, cfg.dof_probe_len.min(train[0].len()))?) } else { None };
    let mut runner = Runner {
        cfg,
        train,
        val,
        probe,
        report: ReductionReport { records: vec![], stopped_early: false, aborted: None, final_record: 0 },
        good: model.clone(),
        stage_counter: 0,
    };
    match runner.run(model) {
        Ok(()) => {}
        Err(Error::Unstable(msg)) => {
            log::warn!("aborting: {msg}");
            runner.report.aborted = Some(msg);
        }
        Err(e) => return Err(e),
    }
    if let Some(dir) = &cfg.output_dir {
        io::save_model(&dir.join("final.json"), &runner.good)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&runner.report)?)?;
    }
    Ok(PipelineOutcome { report: runner.report, model: runner.good })
}

/// Decouples a model's map outside the pipeline; used by the CLI.
pub fn decouple_model(model: &StateSpaceModel, t: Target, pts: &OperatingPointSet, opts: &DecoupleOptions) -> Result<(StateSpaceModel, decoupling::DecoupleDiagnostics)> {
    let map = match nl_of(model, t) {
        Some(Nonlinearity::Coupled(p)) => p,
        _ => return Err(Error::invalid(format!("{t:?} nonlinearity is not coupled"))),
    };
    let (dec, diag) = decoupling::decouple(map, pts, opts)?;
    Ok((with_nl(model, t, Nonlinearity::Decoupled(dec)), diag))
}

/// The decoupled map of `t`, if any.
pub fn decoupled_of(model: &StateSpaceModel, t: Target) -> Option<&DecoupledMap> {
    nl_of(model, t).as_ref().and_then(|n| n.as_decoupled())
}

pub fn replace_nl(model: &StateSpaceModel, t: Target, nl: Nonlinearity) -> StateSpaceModel {
    with_nl(model, t, nl)
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(Target::State),
            "output" => Ok(Target::Output),
            other => Err(Error::invalid(format!("unknown target '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vdp() -> PipelineConfig {
        let spec = GenerateSpec { realizations: 2, seed: 5, ..GenerateSpec::for_system(System::Vdp) };
        PipelineConfig {
            data: DataSource::Generate { spec, n_train: 1, n_validation: 1 },
            r_x: Some(3),
            target_r: 2,
            n_points: 200,
            dof: false,
            decouple: DecoupleOptions { restarts: 2, lambdas: vec![0.0], ..Default::default() },
            finetune: StageBudget { after_decouple: 5, after_unify: 5, after_remove: 5 },
            ..Default::default()
        }
    }

    #[test]
    fn config_rejects_zero_target() {
        let cfg = PipelineConfig { target_r: 0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Schema(_))));
        let cfg = PipelineConfig { stop_threshold: Some(-1.0), ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = small_vdp();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        assert!(PipelineConfig::from_json("{\"target_r\": \"x\"}").is_err());
    }

    #[test]
    fn vdp_short_run_records_are_ordered() {
        let out = run_pipeline(&small_vdp()).unwrap();
        let r = &out.report;
        assert!(r.aborted.is_none());
        let stages: Vec<Stage> = r.records.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![Stage::Initial, Stage::Decouple, Stage::Finetune, Stage::Remove, Stage::Finetune]);
        assert_eq!(r.records[1].r_x, Some(3));
        assert_eq!(r.records[3].r_x, Some(2));
        assert_eq!(decoupled_of(&out.model, Target::State).unwrap().r(), 2);
        assert!(r.records[0].e_rms_val.unwrap() < 1e-10);
    }

    #[test]
    fn threshold_keeps_previous_model() {
        let cfg = PipelineConfig { stop_threshold: Some(1e-300), ..small_vdp() };
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.report.stopped_early);
        assert_eq!(decoupled_of(&out.model, Target::State).unwrap().r(), 3);
        let last = &out.report.records[out.report.final_record];
        assert_eq!(last.r_x, Some(3));
    }

    #[test]
    fn persisted_models_reproduce_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig { output_dir: Some(dir.path().to_path_buf()), ..small_vdp() };
        let out = run_pipeline(&cfg).unwrap();
        let (train, val) = load_data(&cfg.data).unwrap();
        for rec in &out.report.records {
            let m = io::load_model(&dir.path().join(rec.model_file.as_ref().unwrap())).unwrap();
            let e = pooled_e_rms(&m, &train, 0, 1e3).unwrap();
            assert!((e - rec.e_rms_train).abs() <= 1e-12 * rec.e_rms_train.max(1e-300) + 1e-300, "{e} vs {}", rec.e_rms_train);
            let ev = pooled_e_rms(&m, std::slice::from_ref(val.as_ref().unwrap()), 0, 1e3).unwrap();
            assert_eq!(Some(ev), rec.e_rms_val);
        }
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn unstable_start_is_rejected() {
        let mut m = benchmarks::vdp_truth_model(&VdpParams::default()).unwrap();
        m.a[(0, 0)] = 3.0;
        let (train, val) = load_data(&small_vdp().data).unwrap();
        assert!(matches!(run_pipeline_with(&small_vdp(), m, train, val), Err(Error::Unstable(_))));
    }
}
