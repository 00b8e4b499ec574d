//! JSON model files and CSV dataset files.
//!
//! A model file holds `{n, m, p, ts, A, B, C, D, state_nl, output_nl}` with
//! matrices as arrays of rows. A nonlinearity is either
//! `{"type": "coupled", "n_in", "exponents", "coeffs", "affine"}` or
//! `{"type": "decoupled", "W", "V", "branches", "unified"}`.
//!
//! A dataset is a CSV file with header `k,u1..um,y1..yp` plus a sidecar
//! `<stem>.meta.json` holding `{fs, x0}`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Nonlinearity, StateSpaceModel};
use crate::poly::{BranchPolynomial, DecoupledMap, MonomialBasis, PolynomialMap};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n: usize,
    m: usize,
    p: usize,
    ts: f64,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
    #[serde(default)]
    state_nl: Option<NlFile>,
    #[serde(default)]
    output_nl: Option<NlFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BranchFile {
    lowest: u32,
    coeffs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum NlFile {
    Coupled {
        n_in: usize,
        exponents: Vec<Vec<u32>>,
        coeffs: Vec<Vec<f64>>,
        #[serde(default)]
        affine: bool,
    },
    Decoupled {
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        #[serde(rename = "V")]
        v: Vec<Vec<f64>>,
        branches: Vec<BranchFile>,
        #[serde(default)]
        unified: bool,
    },
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize, field: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Schema(format!("field `{field}`: expected {nrows} rows, found {}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::Schema(format!("field `{field}`: row {i} has {} entries, expected {ncols}", r.len())));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn nl_to_file(nl: &Nonlinearity) -> NlFile {
    match nl {
        Nonlinearity::Coupled(p) => NlFile::Coupled {
            n_in: p.n_in(),
            exponents: p.basis.exponents().to_vec(),
            coeffs: rows_of(&p.coeffs),
            affine: p.basis.is_affine(),
        },
        Nonlinearity::Decoupled(d) => NlFile::Decoupled {
            w: rows_of(&d.w),
            v: rows_of(&d.v),
            branches: d.branches.iter().map(|b| BranchFile { lowest: b.lowest, coeffs: b.coeffs.clone() }).collect(),
            unified: d.unified,
        },
    }
}

fn nl_from_file(f: &NlFile, n_out: usize, field: &str) -> Result<Nonlinearity> {
    let wrap = |e: Error| match e {
        Error::Schema(s) => Error::Schema(s),
        other => Error::Schema(format!("field `{field}`: {other}")),
    };
    match f {
        NlFile::Coupled { n_in, exponents, coeffs, affine } => {
            let basis = if *affine {
                MonomialBasis::new_affine(*n_in, exponents.clone())
            } else {
                MonomialBasis::new(*n_in, exponents.clone())
            }
            .map_err(wrap)?;
            let c = matrix(coeffs, n_out, basis.len(), &format!("{field}.coeffs"))?;
            Ok(PolynomialMap::new(basis, c).map_err(wrap)?.into())
        }
        NlFile::Decoupled { w, v, branches, unified } => {
            let r = branches.len();
            let w = matrix(w, n_out, r, &format!("{field}.W"))?;
            let v = matrix(v, v.len(), r, &format!("{field}.V"))?;
            let b = branches.iter().map(|b| BranchPolynomial::new(b.lowest, b.coeffs.clone())).collect();
            Ok(DecoupledMap::new(w, v, b, *unified).map_err(wrap)?.into())
        }
    }
}

pub fn model_to_json(model: &StateSpaceModel) -> Result<String> {
    let f = ModelFile {
        n: model.n(),
        m: model.m(),
        p: model.p(),
        ts: model.ts,
        a: rows_of(&model.a),
        b: rows_of(&model.b),
        c: rows_of(&model.c),
        d: rows_of(&model.d),
        state_nl: model.state_nl.as_ref().map(nl_to_file),
        output_nl: model.output_nl.as_ref().map(nl_to_file),
    };
    Ok(serde_json::to_string_pretty(&f)?)
}

pub fn model_from_json(text: &str) -> Result<StateSpaceModel> {
    let f: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let (n, m, p) = (f.n, f.m, f.p);
    let a = matrix(&f.a, n, n, "A")?;
    let b = matrix(&f.b, n, m, "B")?;
    let c = matrix(&f.c, p, n, "C")?;
    let d = matrix(&f.d, p, m, "D")?;
    let sx = f.state_nl.as_ref().map(|x| nl_from_file(x, n, "state_nl")).transpose()?;
    let sy = f.output_nl.as_ref().map(|x| nl_from_file(x, p, "output_nl")).transpose()?;
    StateSpaceModel::new(a, b, c, d, sx, sy, f.ts).map_err(|e| Error::Schema(e.to_string()))
}

pub fn load_model(path: &Path) -> Result<StateSpaceModel> {
    model_from_json(&fs::read_to_string(path)?)
}

pub fn save_model(path: &Path, model: &StateSpaceModel) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

/// Decoupled map alone, in the same object form used inside model files.
pub fn decoupled_to_json(dec: &DecoupledMap) -> Result<String> {
    Ok(serde_json::to_string_pretty(&nl_to_file(&Nonlinearity::Decoupled(dec.clone())))?)
}

pub fn decoupled_from_json(text: &str) -> Result<DecoupledMap> {
    let f: NlFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let n_out = match &f {
        NlFile::Decoupled { w, .. } => w.len(),
        NlFile::Coupled { .. } => return Err(Error::Schema("expected a decoupled map, found a coupled one".into())),
    };
    match nl_from_file(&f, n_out, "map")? {
        Nonlinearity::Decoupled(d) => Ok(d),
        Nonlinearity::Coupled(_) => unreachable!(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaFile {
    fs: f64,
    #[serde(default)]
    x0: Option<Vec<f64>>,
}

/// `data.csv` → `data.meta.json`.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn dataset_to_csv(ds: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    header.extend((1..=ds.m()).map(|j| format!("u{j}")));
    header.extend((1..=ds.p()).map(|j| format!("y{j}")));
    w.write_record(&header)?;
    for k in 0..ds.len() {
        let mut row = vec![k.to_string()];
        row.extend(ds.u.row(k).iter().map(|v| format!("{v:?}")));
        row.extend(ds.y.row(k).iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

/// Parses the CSV body; `fs` and `x0` come from the sidecar.
pub fn dataset_from_csv(text: &str, fs: f64, x0: Option<DVector<f64>>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header.first().map(String::as_str) != Some("k") {
        return Err(Error::Schema("header must start with `k`".into()));
    }
    let m = header.iter().filter(|h| h.starts_with('u')).count();
    let p = header.iter().filter(|h| h.starts_with('y')).count();
    let expected: Vec<String> = std::iter::once("k".to_string())
        .chain((1..=m).map(|j| format!("u{j}")))
        .chain((1..=p).map(|j| format!("y{j}")))
        .collect();
    if header != expected {
        return Err(Error::Schema(format!("header must be {}, found {}", expected.join(","), header.join(","))));
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // row 1 is the header
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Schema(format!("row {row}: {e}")))?;
        if rec.len() != 1 + m + p {
            return Err(Error::Schema(format!("row {row}: expected {} fields, found {}", 1 + m + p, rec.len())));
        }
        let vals: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(c, s)| s.trim().parse::<f64>().map_err(|_| Error::Schema(format!("row {row}, column `{}`: cannot parse {s:?}", header[c]))))
            .collect::<Result<_>>()?;
        u.extend_from_slice(&vals[1..1 + m]);
        y.extend_from_slice(&vals[1 + m..]);
    }
    let n = (u.len() + y.len()) / (m + p).max(1);
    let u = DMatrix::from_row_slice(n, m, &u);
    let y = DMatrix::from_row_slice(n, p, &y);
    Dataset::new(u, y, fs, x0)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_csv(ds)?)?;
    let meta = MetaFile { fs: ds.fs, x0: ds.x0.as_ref().map(|v| v.iter().copied().collect()) };
    fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    let meta_text = fs::read_to_string(&mp).map_err(|e| Error::Schema(format!("metadata file {}: {e}", mp.display())))?;
    let meta: MetaFile = serde_json::from_str(&meta_text).map_err(|e| Error::Schema(format!("{}: {e}", mp.display())))?;
    let text = fs::read_to_string(path)?;
    dataset_from_csv(&text, meta.fs, meta.x0.map(DVector::from_vec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> StateSpaceModel {
        let basis = MonomialBasis::full(3, &[2, 3]).unwrap();
        let coupled = PolynomialMap::new(basis.clone(), DMatrix::from_fn(2, basis.len(), |i, j| 0.1 / (1.0 + i as f64 + j as f64))).unwrap();
        let dec = DecoupledMap::new(
            DMatrix::from_row_slice(1, 2, &[0.3, -1.0 / 3.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, std::f64::consts::PI, 2.0]),
            vec![BranchPolynomial::new(2, vec![1.0, 0.1]), BranchPolynomial::new(2, vec![-0.7, 1e-17])],
            false,
        )
        .unwrap();
        StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1e-300]),
            DMatrix::from_element(1, 1, 0.0),
            Some(coupled.into()),
            Some(dec.into()),
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = sample_model();
        let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(&model_to_json(&sample_model()).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("B");
        let err = model_from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        assert!(err.to_string().contains("`B`"), "{err}");
    }

    #[test]
    fn wrong_shape_is_reported() {
        let mut v: serde_json::Value = serde_json::from_str(&model_to_json(&sample_model()).unwrap()).unwrap();
        v["A"] = serde_json::json!([[1.0, 2.0]]);
        let err = model_from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("`A`"), "{err}");
    }

    #[test]
    fn dataset_round_trip_and_row_errors() {
        let ds = Dataset::new(
            DMatrix::from_fn(5, 2, |k, j| (k as f64 + 0.1) / (j as f64 + 3.0)),
            DMatrix::from_fn(5, 1, |k, _| -(k as f64).sqrt()),
            750.0,
            Some(DVector::from_vec(vec![0.1, -2.0])),
        )
        .unwrap();
        let text = dataset_to_csv(&ds).unwrap();
        assert!(text.starts_with("k,u1,u2,y1\n"));
        let back = dataset_from_csv(&text, ds.fs, ds.x0.clone()).unwrap();
        assert_eq!(back, ds);

        let mut lines: Vec<&str> = text.lines().collect();
        let truncated = lines[3].rsplit_once(',').unwrap().0.to_string();
        lines[3] = &truncated;
        let err = dataset_from_csv(&lines.join("\n"), 1.0, None).unwrap_err();
        assert!(err.to_string().contains("row 4"), "{err}");
    }

    #[test]
    fn files_with_sidecar() {
        let dir = std::env::temp_dir().join(format!("pnlss-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("train.csv");
        let ds = Dataset::new(DMatrix::from_element(3, 1, 1.5), DMatrix::from_element(3, 1, -0.5), 100.0, None).unwrap();
        save_dataset(&p, &ds).unwrap();
        assert!(dir.join("train.meta.json").exists());
        assert_eq!(load_dataset(&p).unwrap(), ds);
        let mp = dir.join("m.json");
        save_model(&mp, &sample_model()).unwrap();
        assert_eq!(load_model(&mp).unwrap(), sample_model());
        fs::remove_dir_all(&dir).unwrap();
    }
}
