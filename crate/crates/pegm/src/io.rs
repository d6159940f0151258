//! File formats: data matrices as CSV with a single `x1,...,xp` header row,
//! parameter matrices as headerless square CSV of decimals, reports as JSON,
//! and a JSON descriptor for trained hidden-unit models that stores the
//! parameter matrix in a CSV file beside it.

use crate::boltzmann::{BoltzmannModel, Mask, MaskSpec};
use crate::error::{PegmError, Result};
use crate::model::{DataMatrix, ModelFamily, ThetaMatrix};
use ndarray::Array2;
use std::path::{Path, PathBuf};

/// Read an observation matrix. The header must be exactly `x1,...,xp`; every
/// cell must parse as a decimal admissible for the family.
pub fn read_data_csv(path: impl AsRef<Path>, family: ModelFamily) -> Result<DataMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let p = headers.len();
    for (j, h) in headers.iter().enumerate() {
        let expect = format!("x{}", j + 1);
        if h != expect {
            return Err(PegmError::contract(format!(
                "{}: expected header column {} to be `{expect}`, got `{h}`",
                path.display(),
                j + 1
            )));
        }
    }
    let mut values: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != p {
            return Err(PegmError::contract(format!(
                "{}: row {} has {} fields, header has {p}",
                path.display(),
                i + 1,
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                PegmError::contract(format!(
                    "{}: row {}, column {}: `{field}` is not a number",
                    path.display(),
                    i + 1,
                    j + 1
                ))
            })?;
            values.push(v);
        }
        n += 1;
    }
    let rows = Array2::from_shape_vec((n, p), values).expect("counted shape");
    DataMatrix::new(rows, family)
}

pub fn write_data_csv(path: impl AsRef<Path>, data: &DataMatrix) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let header: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
    writer.write_record(&header)?;
    for row in data.rows().outer_iter() {
        let fields: Vec<String> = row.iter().map(|v| format_cell(*v)).collect();
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}

/// Read a parameter matrix: headerless, square, symmetric decimals.
pub fn read_theta_csv(path: impl AsRef<Path>) -> Result<ThetaMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values: Vec<f64> = Vec::new();
    let mut p = 0usize;
    let mut n_rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if i == 0 {
            p = record.len();
        } else if record.len() != p {
            return Err(PegmError::contract(format!(
                "{}: row {} has {} fields, row 1 has {p}",
                path.display(),
                i + 1,
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                PegmError::contract(format!(
                    "{}: row {}, column {}: `{field}` is not a number",
                    path.display(),
                    i + 1,
                    j + 1
                ))
            })?;
            values.push(v);
        }
        n_rows += 1;
    }
    if n_rows != p || p == 0 {
        return Err(PegmError::contract(format!(
            "{}: parameter matrix must be square and nonempty, got {n_rows} x {p}",
            path.display()
        )));
    }
    let values = Array2::from_shape_vec((p, p), values).expect("counted shape");
    ThetaMatrix::new(values)
}

pub fn write_theta_csv(path: impl AsRef<Path>, theta: &ThetaMatrix) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path.as_ref())?;
    for row in theta.values().outer_iter() {
        let fields: Vec<String> = row.iter().map(|v| format_cell(*v)).collect();
        writer.write_record(&fields)?;
    }
    writer.flush()?;
    Ok(())
}

/// {} on f64 prints the shortest decimal that round-trips exactly.
fn format_cell(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path.as_ref(), text + "\n")?;
    Ok(())
}

/// On-disk form of a trained hidden-unit model: dimensions, connectivity
/// spec, and the file name (relative to the descriptor) of the joint
/// parameter CSV.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelDescriptor {
    pub p: usize,
    pub m: usize,
    pub mask: MaskSpec,
    pub theta_csv: String,
}

/// Persist a model as `<path>` (JSON descriptor) plus a parameter CSV named
/// after the descriptor's file stem. Returns the CSV path.
pub fn write_model(path: impl AsRef<Path>, model: &BoltzmannModel) -> Result<PathBuf> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| PegmError::contract("model path needs a UTF-8 file name"))?;
    let csv_name = format!("{stem}.theta.csv");
    let csv_path = path.with_file_name(&csv_name);
    write_theta_csv(&csv_path, &model.theta)?;
    write_json(
        path,
        &ModelDescriptor {
            p: model.p,
            m: model.m,
            mask: model.mask.spec.clone(),
            theta_csv: csv_name,
        },
    )?;
    Ok(csv_path)
}

/// Load a model descriptor and its parameter CSV (resolved relative to the
/// descriptor), validating dimensions and connectivity.
pub fn read_model(path: impl AsRef<Path>) -> Result<BoltzmannModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let desc: ModelDescriptor = serde_json::from_str(&text)?;
    let csv_path = if Path::new(&desc.theta_csv).is_absolute() {
        PathBuf::from(&desc.theta_csv)
    } else {
        path.parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&desc.theta_csv)
    };
    let theta = read_theta_csv(&csv_path)?;
    if theta.p() != desc.p + desc.m {
        return Err(PegmError::contract(format!(
            "{}: parameter is {} x {} but descriptor says p + m = {}",
            csv_path.display(),
            theta.p(),
            theta.p(),
            desc.p + desc.m
        )));
    }
    let mask = Mask::from_spec(&desc.mask, desc.p, desc.m)?;
    if !mask.is_respected(&theta) {
        return Err(PegmError::contract(format!(
            "{}: parameter has entries outside the declared connectivity",
            csv_path.display()
        )));
    }
    Ok(BoltzmannModel {
        p: desc.p,
        m: desc.m,
        theta,
        mask,
    })
}
