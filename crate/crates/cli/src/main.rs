//! `pnlss`: generate benchmark data, decouple, unify, reduce, fine-tune and
//! classify PNLSS models.
//!
//! Exit codes: 0 success, 2 instability, 1 anything else. Log verbosity is
//! taken from `RUST_LOG`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnlss_core::benchmarks::{self, GenerateSpec, System};
use pnlss_core::classify::{self, ClassifyOptions};
use pnlss_core::decoupling::{sample_operating_points, DecoupleOptions, PointSource};
use pnlss_core::finetune::{self, FinetuneOptions};
use pnlss_core::io;
use pnlss_core::optim::LmConfig;
use pnlss_core::pipeline::{self, PipelineConfig, Target};
use pnlss_core::reduction::{self, Refit, RemoveOptions, UnifyOptions};
use pnlss_core::spectrum;
use pnlss_core::{Dataset, Error, Nonlinearity, Result, StateSpaceModel};

#[derive(Parser)]
#[command(name = "pnlss", version, about = "Reduce polynomial nonlinear state-space models to decoupled form")]
struct Cli {
    /// Run all parallel sections on one thread for bit-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesise multisine records from a benchmark system.
    Generate(GenerateArgs),
    /// Replace a coupled nonlinearity with a decoupled one.
    Decouple(DecoupleArgs),
    /// Make all branches of a decoupled nonlinearity share one polynomial.
    Unify(MapArgs),
    /// Remove branches down to a target count.
    Reduce(ReduceArgs),
    /// Re-optimise all parameters on the simulation error.
    Finetune(FinetuneArgs),
    /// Label the single branch of a model as spring, damper or mixed.
    Classify(ClassifyArgs),
    /// Run the full reduction from a JSON config.
    Pipeline(PipelineArgs),
    /// Export the amplitude spectrum of a record or a model simulation.
    Spectrum(SpectrumArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "vdp")]
    system: System,
    /// JSON generator spec; command-line values override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    realizations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    rms: Option<f64>,
    #[arg(long)]
    periods: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    /// File name prefix of the records.
    #[arg(long, default_value = "data")]
    prefix: String,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Record whose simulated `[x; u]` samples give the operating points.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "state")]
    target: Target,
    #[arg(long, default_value_t = 1000)]
    n_points: usize,
    #[arg(long, default_value = "sampled")]
    source: String,
    #[arg(long, default_value_t = 0)]
    transient: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecoupleArgs {
    #[command(flatten)]
    map: MapArgs,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    degree: Option<u32>,
    /// Comma-separated smoothness weights.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Where to write the diagnostics JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    map: MapArgs,
    #[arg(long, default_value_t = 1)]
    r_target: usize,
    #[arg(long, default_value = "linear")]
    refit: Refit,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, required = true)]
    train: Vec<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    transient: usize,
    #[arg(long, default_value_t = 1e3)]
    bound_factor: f64,
    #[arg(long)]
    out: PathBuf,
    /// CSV with iter,V_LS,lambda,e_rms_train,e_rms_val.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    conclusive_threshold: f64,
    #[arg(long, default_value_t = 0.05)]
    component_threshold: f64,
    #[arg(long)]
    include_acceleration: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    data: PathBuf,
    /// Use this model's simulated output instead of the measured one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Spectrum of the residual `y − ŷ` (requires --model).
    #[arg(long)]
    error: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Outcome of a command that completed but hit an instability.
struct Unstable;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = if cli.deterministic {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(|| run(cli.cmd)),
            Err(e) => Err(Error::InvalidArgument(e.to_string())),
        }
    } else {
        run(cli.cmd)
    };
    match result {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Unstable)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Unstable(_) => 2,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> Result<Option<Unstable>> {
    match cmd {
        Cmd::Generate(a) => generate(a),
        Cmd::Decouple(a) => decouple(a),
        Cmd::Unify(a) => unify(a),
        Cmd::Reduce(a) => reduce(a),
        Cmd::Finetune(a) => finetune_cmd(a),
        Cmd::Classify(a) => classify_cmd(a),
        Cmd::Pipeline(a) => pipeline_cmd(a),
        Cmd::Spectrum(a) => spectrum_cmd(a),
    }
    .map(|unstable| if unstable { Some(Unstable) } else { None })
}

fn generate(a: GenerateArgs) -> Result<bool> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Schema(format!("generator spec: {e}")))?,
        None => GenerateSpec::for_system(a.system),
    };
    if let Some(v) = a.realizations {
        spec.realizations = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if a.snr_db.is_some() {
        spec.snr_db = a.snr_db;
    }
    if let Some(v) = a.rms {
        spec.rms = v;
    }
    if let Some(v) = a.periods {
        spec.periods = v;
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let data = benchmarks::generate(&spec)?;
    for (i, ds) in data.iter().enumerate() {
        io::save_dataset(&a.out_dir.join(format!("{}_{i}.csv", a.prefix)), ds)?;
    }
    if spec.system == System::Vdp {
        io::save_model(&a.out_dir.join("truth.json"), &benchmarks::vdp_truth_model(&spec.vdp)?)?;
    }
    println!("wrote {} records to {}", data.len(), a.out_dir.display());
    Ok(false)
}

fn operating_points(model: &StateSpaceModel, a: &MapArgs, n_in: usize) -> Result<pnlss_core::decoupling::OperatingPointSet> {
    let ds = io::load_dataset(&a.data)?;
    let rec = pipeline::state_input_record(model, std::slice::from_ref(&ds), a.transient, n_in)?;
    let source: PointSource = serde_json::from_value(serde_json::Value::String(a.source.clone()))
        .map_err(|_| Error::InvalidArgument(format!("unknown point source '{}'", a.source)))?;
    if source == PointSource::Explicit {
        return Err(Error::InvalidArgument("point source must be sampled or gaussian".into()));
    }
    sample_operating_points(&rec, a.n_points.min(rec.nrows()), source, a.seed)
}

fn target_nl(model: &StateSpaceModel, t: Target) -> Result<&Nonlinearity> {
    let nl = match t {
        Target::State => &model.state_nl,
        Target::Output => &model.output_nl,
    };
    nl.as_ref().ok_or_else(|| Error::InvalidArgument(format!("model has no {t:?} nonlinearity")))
}

fn decouple(a: DecoupleArgs) -> Result<bool> {
    let model = io::load_model(&a.map.model)?;
    let n_in = target_nl(&model, a.map.target)?.n_in();
    let pts = operating_points(&model, &a.map, n_in)?;
    let mut opts = DecoupleOptions { r: a.r, degree: a.degree, seed: a.map.seed, ..Default::default() };
    if let Some(r) = a.restarts {
        opts.restarts = r;
    }
    if let Some(l) = a.lambdas {
        opts.lambdas = l;
    }
    let (out, diag) = pipeline::decouple_model(&model, a.map.target, &pts, &opts)?;
    io::save_model(&a.map.out, &out)?;
    let text = serde_json::to_string_pretty(&diag)?;
    match &a.diagnostics {
        Some(p) => std::fs::write(p, text)?,
        None => println!("r = {}, e_cpd = {:.3e}, e_f = {:.3e}, flagged = {}", diag.r, diag.e_cpd, diag.e_f, diag.flagged),
    }
    Ok(false)
}

fn decoupled_target(model: &StateSpaceModel, t: Target) -> Result<pnlss_core::DecoupledMap> {
    pipeline::decoupled_of(model, t)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("{t:?} nonlinearity is not decoupled")))
}

fn unify(a: MapArgs) -> Result<bool> {
    let model = io::load_model(&a.model)?;
    let dec = decoupled_target(&model, a.target)?;
    let pts = operating_points(&model, &a, dec.n_in())?;
    let res = reduction::unify_branches(&dec, &pts.points, &UnifyOptions::default())?;
    io::save_model(&a.out, &pipeline::replace_nl(&model, a.target, Nonlinearity::Decoupled(res.map)))?;
    println!(
        "template branch {}, e_f {:.3e} -> {:.3e}, per output {:?}",
        res.template_branch, res.initial_report.aggregate_ef, res.report.aggregate_ef, res.report.per_output_ef
    );
    Ok(false)
}

fn reduce(a: ReduceArgs) -> Result<bool> {
    let model = io::load_model(&a.map.model)?;
    let dec = decoupled_target(&model, a.map.target)?;
    let pts = operating_points(&model, &a.map, dec.n_in())?;
    let opts = RemoveOptions { refit: a.refit, ..Default::default() };
    let (map, steps) = reduction::reduce_to(&dec, &pts.points, a.r_target, &opts)?;
    for s in &steps {
        println!(
            "removed branch {} -> r = {}, e_f {:.3e} (plain deletion {:.3e})",
            s.removed_index,
            s.map.r(),
            s.report.aggregate_ef,
            s.deletion_report.aggregate_ef
        );
    }
    io::save_model(&a.map.out, &pipeline::replace_nl(&model, a.map.target, Nonlinearity::Decoupled(map)))?;
    Ok(false)
}

fn finetune_cmd(a: FinetuneArgs) -> Result<bool> {
    let model = io::load_model(&a.model)?;
    let train = a.train.iter().map(|p| io::load_dataset(p)).collect::<Result<Vec<Dataset>>>()?;
    let val = a.validation.as_ref().map(|p| io::load_dataset(p)).transpose()?;
    let opts = FinetuneOptions {
        lm: LmConfig { max_iter: a.max_iter, ..Default::default() },
        bound_factor: a.bound_factor,
        transient: a.transient,
        ..Default::default()
    };
    let res = finetune::levenberg_marquardt(&model, &train, val.as_ref(), &opts)?;
    io::save_model(&a.out, &res.model)?;
    if let Some(p) = &a.trace {
        let mut f = std::fs::File::create(p)?;
        writeln!(f, "iter,V_LS,lambda,e_rms_train,e_rms_val")?;
        for r in &res.trace {
            let val = r.e_rms_val.map_or(String::new(), |v| format!("{v:?}"));
            writeln!(f, "{},{:?},{:?},{:?},{}", r.iter, r.v_ls, r.lambda, r.e_rms_train, val)?;
        }
    }
    if let Some(last) = res.trace.last() {
        println!("{:?} after {} iterations: e_rms_train {:.4e}, e_rms_val {:?}", res.termination, last.iter, last.e_rms_train, last.e_rms_val);
    }
    Ok(false)
}

fn classify_cmd(a: ClassifyArgs) -> Result<bool> {
    let model = io::load_model(&a.model)?;
    let ds = io::load_dataset(&a.data)?;
    let opts = ClassifyOptions {
        conclusive_threshold: a.conclusive_threshold,
        component_threshold: a.component_threshold,
        include_acceleration: a.include_acceleration,
    };
    let res = classify::classify_model(&model, &ds, &opts)?;
    println!("{}", serde_json::to_string_pretty(&res)?);
    Ok(false)
}

fn pipeline_cmd(a: PipelineArgs) -> Result<bool> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if a.output_dir.is_some() {
        cfg.output_dir = a.output_dir;
    }
    let out = pipeline::run_pipeline(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&out.report)?);
    Ok(out.report.aborted.is_some())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn spectrum_cmd(a: SpectrumArgs) -> Result<bool> {
    let ds = io::load_dataset(&a.data)?;
    let y = match &a.model {
        Some(p) => {
            let model = io::load_model(p)?;
            let sim = model.simulate(&ds.u, ds.x0.as_ref())?;
            if sim.unstable {
                return Err(Error::Unstable("model diverged on the record".into()));
            }
            if a.error {
                &ds.y - sim.y
            } else {
                sim.y
            }
        }
        None if a.error => return Err(Error::InvalidArgument("--error needs --model".into())),
        None => ds.y.clone(),
    };
    let s = spectrum::spectrum(&y, ds.fs)?;
    write_text(&a.out, &spectrum::to_csv(&s)?)?;
    Ok(false)
}
