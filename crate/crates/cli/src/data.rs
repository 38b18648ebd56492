//! CSV ingest and export.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use spconj::predict::format_float;
use spconj::{LocationSet, SpatialData};

use crate::config::ColumnSpec;
use crate::error::{CliError, Result};

/// A parsed data file. `x` includes the intercept column when requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub locs: LocationSet,
    /// `None` when the response column is absent and was not required.
    pub y: Option<DVector<f64>>,
    pub x: DMatrix<f64>,
    /// Names of the columns of `x`, `(intercept)` first when present.
    pub predictor_names: Vec<String>,
    pub coord_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.locs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locs.is_empty()
    }

    pub fn spatial(&self) -> Result<SpatialData> {
        let y = self.y.clone().ok_or_else(|| CliError::Config("data has no response column".into()))?;
        Ok(SpatialData::new(self.locs.clone(), y, self.x.clone())?)
    }
}

pub const INTERCEPT: &str = "(intercept)";

/// Read a delimited file with a header row. Predictor columns default to every
/// column that is neither a coordinate nor the response.
pub fn ingest_csv(path: &Path, spec: &ColumnSpec, require_response: bool) -> Result<Dataset> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn { path: shown.clone(), column: name.to_owned() })
    };
    let coord_cols: Vec<usize> = spec.coords.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let response_col = match find(&spec.response) {
        Ok(c) => Some(c),
        Err(e) if require_response => return Err(e),
        Err(_) => None,
    };
    let predictor_names: Vec<String> = match &spec.predictors {
        Some(names) => names.clone(),
        None => header
            .iter()
            .filter(|h| !spec.coords.contains(h) && **h != spec.response)
            .cloned()
            .collect(),
    };
    let predictor_cols: Vec<usize> = predictor_names.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut coords = Vec::new();
    let mut y = Vec::new();
    let mut preds = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let num = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| CliError::Parse {
                path: shown.clone(),
                line,
                column: header[col].clone(),
                value: raw.to_owned(),
            })
        };
        for &c in &coord_cols {
            coords.push(num(c)?);
        }
        if let Some(c) = response_col {
            y.push(num(c)?);
        }
        for &c in &predictor_cols {
            preds.push(num(c)?);
        }
    }
    let n = coords.len() / coord_cols.len();
    let locs = LocationSet::new(coords, coord_cols.len()).map_err(|e| match e {
        spconj::Error::DuplicateLocation { first, second } => {
            CliError::DuplicateCoordinates { path: shown.clone(), first: first + 2, second: second + 2 }
        }
        other => other.into(),
    })?;
    let k = predictor_cols.len();
    let offset = usize::from(spec.intercept);
    let x = DMatrix::from_fn(n, k + offset, |i, j| if j < offset { 1.0 } else { preds[i * k + j - offset] });
    let mut names = Vec::with_capacity(k + offset);
    if spec.intercept {
        names.push(INTERCEPT.to_owned());
    }
    names.extend(predictor_names);
    Ok(Dataset {
        locs,
        y: response_col.map(|_| DVector::from_vec(y)),
        x,
        predictor_names: names,
        coord_names: spec.coords.clone(),
    })
}

/// Write `coords, response, predictors` (the intercept column is not written).
pub fn write_dataset(path: &Path, data: &Dataset, response_name: &str) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    let skip = usize::from(data.predictor_names.first().is_some_and(|n| n == INTERCEPT));
    let mut header: Vec<&str> = data.coord_names.iter().map(String::as_str).collect();
    if data.y.is_some() {
        header.push(response_name);
    }
    header.extend(data.predictor_names[skip..].iter().map(String::as_str));
    out.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.locs.point(i).iter().map(|&v| format_float(v)).collect();
        if let Some(y) = &data.y {
            rec.push(format_float(y[i]));
        }
        rec.extend((skip..data.x.ncols()).map(|j| format_float(data.x[(i, j)])));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// A table of named columns written with fixed float formatting.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(header)?;
    for row in rows {
        out.write_record(row.iter().map(|&v| format_float(v)))?;
    }
    out.flush()?;
    Ok(())
}

/// Report line for the manifest: row count and bounding box.
pub fn describe(data: &Dataset) -> serde_json::Value {
    let bbox: Vec<[f64; 2]> = data.locs.bounding_box().into_iter().map(|(lo, hi)| [lo, hi]).collect();
    serde_json::json!({ "rows": data.len(), "bounding_box": bbox, "predictors": data.predictor_names })
}
