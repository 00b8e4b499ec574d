use nalgebra::{DMatrix, DVector};
use pnlss_core::benchmarks::{self, GenerateSpec, System};
use pnlss_core::decoupling::{self, DecoupleOptions};
use pnlss_core::pipeline::{self, DataSource, PipelineConfig, Target};
use pnlss_core::{io, metrics};

#[test]
fn generated_records_survive_csv_and_reproduce_truth() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenerateSpec { realizations: 2, seed: 11, ..GenerateSpec::for_system(System::Vdp) };
    let data = benchmarks::generate(&spec).unwrap();
    let truth = benchmarks::vdp_truth_model(&spec.vdp).unwrap();
    for (i, ds) in data.iter().enumerate() {
        let path = dir.path().join(format!("rec_{i}.csv"));
        io::save_dataset(&path, ds).unwrap();
        let back = io::load_dataset(&path).unwrap();
        assert_eq!(&back, ds);
        let sim = truth.simulate(&back.u, back.x0.as_ref()).unwrap();
        assert!(metrics::e_rms(&back.y, &sim.y).unwrap() < 1e-10);
    }
}

#[test]
fn decoupled_truth_survives_json() {
    let truth = benchmarks::vdp_truth_model(&Default::default()).unwrap();
    let pts = decoupling::sample_gaussian(&DVector::zeros(2), &DVector::from_element(2, 1.0), 300, 4).unwrap();
    let (model, diag) = pipeline::decouple_model(&truth, Target::State, &pts, &DecoupleOptions { r: Some(3), restarts: 2, ..Default::default() }).unwrap();
    assert!(diag.e_f < 1e-6);
    let back = io::model_from_json(&io::model_to_json(&model).unwrap()).unwrap();
    assert_eq!(back, model);
    let u = DMatrix::from_fn(500, 1, |k, _| 20.0 * (0.05 * k as f64).sin());
    let (a, b) = (truth.simulate(&u, None).unwrap(), back.simulate(&u, None).unwrap());
    assert!(metrics::e_rms(&a.y, &b.y).unwrap() < 1e-6);
}

#[test]
fn pipeline_from_saved_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenerateSpec { realizations: 2, seed: 5, ..GenerateSpec::for_system(System::Vdp) };
    let data = benchmarks::generate(&spec).unwrap();
    let paths: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let p = dir.path().join(format!("d{i}.csv"));
            io::save_dataset(&p, ds).unwrap();
            p
        })
        .collect();
    let cfg = PipelineConfig {
        data: DataSource::Files { train: vec![paths[0].clone()], validation: Some(paths[1].clone()) },
        r_x: Some(3),
        target_r: 3,
        n_points: 300,
        dof: false,
        ..Default::default()
    };
    let out = pipeline::run_pipeline(&cfg).unwrap();
    assert!(out.report.aborted.is_none());
    assert!(out.report.records[out.report.final_record].e_rms_val.unwrap() < 1e-6);
}
