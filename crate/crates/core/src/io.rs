//! Dense matrix CSV files and JSON run reports.
//!
//! A matrix file starts with a `rows,cols` header followed by one line per
//! row of comma-separated values written with 17 significant digits, so
//! values read back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{FactorModel, LossCurve, Method, TrainConfig};

pub fn matrix_to_csv(m: ArrayView2<f64>) -> String {
    let mut out = format!("{},{}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or_else(|| parse_error(1, "missing header"))?;
    let dims: Vec<&str> = header.split(',').map(str::trim).collect();
    let [rows, cols] = dims[..] else {
        return Err(parse_error(1, format!("expected \"rows,cols\", found {header:?}")));
    };
    let rows: usize = rows.parse().map_err(|_| parse_error(1, format!("bad row count {rows:?}")))?;
    let cols: usize = cols.parse().map_err(|_| parse_error(1, format!("bad column count {cols:?}")))?;
    let mut data = Vec::with_capacity(rows.saturating_mul(cols));
    let mut seen = 0;
    for (lineno, line) in lines {
        if line.is_empty() {
            // rows of a zero-column matrix are blank lines
            if cols == 0 && seen < rows {
                seen += 1;
            }
            continue;
        }
        if seen == rows {
            return Err(parse_error(lineno, format!("more than the {rows} declared rows")));
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_error(lineno, format!("not a number: {field:?}")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_error(
                lineno,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(parse_error(
            text.lines().count() + 1,
            format!("expected {rows} rows, found {seen}"),
        ));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| parse_error(1, e.to_string()))
}

pub fn write_matrix(path: impl AsRef<Path>, m: ArrayView2<f64>) -> Result<()> {
    fs::write(path, matrix_to_csv(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    matrix_from_csv(&fs::read_to_string(path)?)
}

/// Learned weights and quantiles of a quantile map, one row per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub weights: Array2<f64>,
    pub quantiles: Array2<f64>,
}

impl QuantileTable {
    pub fn from_set(set: &crate::params::PrecursorSet) -> Result<Self> {
        Ok(Self {
            weights: set.weight_matrix(),
            quantiles: set.quantile_matrix()?,
        })
    }

    /// Cumulative weights, the right ends of each quantile's level interval.
    pub fn levels(&self) -> Array2<f64> {
        let mut out = self.weights.clone();
        out.accumulate_axis_inplace(ndarray::Axis(1), |&prev, cur| *cur += prev);
        out
    }
}

/// Everything a training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub config: TrainConfig,
    /// Shape of the training data.
    pub rows: usize,
    pub cols: usize,
    pub final_kl: f64,
    pub curve: LossCurve,
    pub inflate: Option<QuantileTable>,
    pub deflate: Option<QuantileTable>,
    pub seconds: f64,
    pub threads: usize,
    pub model: FactorModel,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
