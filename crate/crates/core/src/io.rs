//! File formats: the CSV panel layout (header row of series names, one row
//! per time period), the JSON fit schema, and the JSON truth sidecar written
//! next to simulated panels. All floating-point values are serialized in
//! shortest round-trip form, so write → read is lossless.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{FactorModelFit, FitDiagnostics, FitMethod, PanelData};
use crate::simulate::SimulatedPanel;
use crate::{Error, Result};

/// Parses the CSV panel format: first row series names, then one row of
/// decimal floats per time period. Missing values are an error.
pub fn read_panel_csv<R: Read>(reader: R) -> Result<(Vec<String>, PanelData)> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = csv_reader
        .headers()
        .map_err(|e| Error::Parse(format!("cannot read header row: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    let n = names.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0usize;
    for (row_idx, record) in csv_reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", row_idx + 2)))?;
        if record.len() != n {
            return Err(Error::Parse(format!(
                "row {}: expected {n} fields, found {}",
                row_idx + 2,
                record.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(Error::Parse(format!(
                    "row {}, column {} ({}): missing values are not supported",
                    row_idx + 2,
                    col + 1,
                    names[col]
                )));
            }
            let value: f64 = field.parse().map_err(|_| {
                Error::Parse(format!(
                    "row {}, column {} ({}): cannot parse '{field}' as a number",
                    row_idx + 2,
                    col + 1,
                    names[col]
                ))
            })?;
            rows.push(value);
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::Parse("panel has no observation rows".into()));
    }
    let panel = PanelData::new(DMatrix::from_row_slice(t, n, &rows))?;
    Ok((names, panel))
}

/// Writes a matrix in the CSV panel format with the given column names.
pub fn write_matrix_csv<W: Write>(
    writer: W,
    names: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    if names.len() != values.ncols() {
        return Err(Error::InvalidInput(format!(
            "{} column names for a {}-column matrix",
            names.len(),
            values.ncols()
        )));
    }
    let mut csv_writer = csv::Writer::from_writer(writer);
    csv_writer
        .write_record(names)
        .map_err(|e| Error::Parse(format!("cannot write header: {e}")))?;
    for i in 0..values.nrows() {
        let row: Vec<String> = (0..values.ncols())
            .map(|j| format!("{}", values[(i, j)]))
            .collect();
        csv_writer
            .write_record(&row)
            .map_err(|e| Error::Parse(format!("cannot write row {i}: {e}")))?;
    }
    csv_writer
        .flush()
        .map_err(Error::Io)?;
    Ok(())
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Parse(format!("{what} is empty")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse(format!("{what} rows have inconsistent lengths")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

/// Serialized diagnostics, mirroring [`FitDiagnostics`].
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DiagnosticsFile {
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub foc_residual: Option<f64>,
    pub eigengap_warning: bool,
    pub rotation_applied: bool,
    pub near_tie_warning: bool,
    pub min_implied_idio_eigenvalue: Option<f64>,
}

/// The on-disk fit schema: `r`, `method`, `loadings[n][r]`,
/// `idio_variances[n]`, `factors[T][r]`, `diagnostics`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFile {
    pub r: usize,
    pub method: String,
    pub loadings: Vec<Vec<f64>>,
    pub idio_variances: Vec<f64>,
    pub factors: Vec<Vec<f64>>,
    pub diagnostics: DiagnosticsFile,
}

impl FitFile {
    pub fn from_fit(fit: &FactorModelFit) -> Self {
        let d = &fit.diagnostics;
        Self {
            r: fit.r,
            method: fit.method.as_str().to_owned(),
            loadings: matrix_to_rows(&fit.loadings),
            idio_variances: fit.idio_variances.iter().copied().collect(),
            factors: matrix_to_rows(&fit.factors),
            diagnostics: DiagnosticsFile {
                loglik_trace: d.loglik_trace.clone(),
                iterations: d.iterations,
                converged: d.converged,
                foc_residual: d.foc_residual,
                eigengap_warning: d.eigengap_warning,
                rotation_applied: d.rotation_applied,
                near_tie_warning: d.near_tie_warning,
                min_implied_idio_eigenvalue: d.min_implied_idio_eigenvalue,
            },
        }
    }

    /// Rebuilds the in-memory fit against the panel it came from; residuals
    /// are recomputed as `X − FΛ'`.
    pub fn into_fit(self, panel: &PanelData) -> Result<FactorModelFit> {
        let method = parse_method(&self.method).ok_or_else(|| {
            Error::Parse(format!("unknown estimation method '{}'", self.method))
        })?;
        let loadings = rows_to_matrix(&self.loadings, "loadings")?;
        let factors = rows_to_matrix(&self.factors, "factors")?;
        if loadings.nrows() != panel.n_series() {
            return Err(Error::InvalidInput(format!(
                "fit has {} series but the panel has {}",
                loadings.nrows(),
                panel.n_series()
            )));
        }
        if loadings.ncols() != self.r || factors.ncols() != self.r {
            return Err(Error::Parse("fit matrices do not match the declared r".into()));
        }
        if factors.nrows() != panel.n_periods() {
            return Err(Error::InvalidInput(format!(
                "fit has {} periods but the panel has {}",
                factors.nrows(),
                panel.n_periods()
            )));
        }
        if self.idio_variances.len() != panel.n_series() {
            return Err(Error::Parse("idio_variances length does not match the panel".into()));
        }
        let residuals = panel.values() - &factors * loadings.transpose();
        let d = self.diagnostics;
        Ok(FactorModelFit {
            loadings,
            idio_variances: DVector::from_vec(self.idio_variances),
            factors,
            residuals,
            r: self.r,
            method,
            diagnostics: FitDiagnostics {
                loglik_trace: d.loglik_trace,
                iterations: d.iterations,
                converged: d.converged,
                foc_residual: d.foc_residual,
                eigengap_warning: d.eigengap_warning,
                rotation_applied: d.rotation_applied,
                near_tie_warning: d.near_tie_warning,
                min_implied_idio_eigenvalue: d.min_implied_idio_eigenvalue,
            },
        })
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| Error::Parse(format!("cannot serialize fit: {e}")))
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        serde_json::from_reader(reader).map_err(|e| Error::Parse(format!("cannot parse fit: {e}")))
    }
}

pub fn parse_method(s: &str) -> Option<FitMethod> {
    match s {
        "pc" => Some(FitMethod::Pc),
        "qml_em" => Some(FitMethod::QmlEm),
        "qml_homo" => Some(FitMethod::QmlHomo),
        "qml_unrestricted" => Some(FitMethod::QmlUnrestricted),
        "ols_oracle" => Some(FitMethod::OlsOracle),
        _ => None,
    }
}

/// Truth sidecar written next to simulated panels: the identified loadings
/// and factors that generated the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub r: usize,
    pub loadings: Vec<Vec<f64>>,
    pub factors: Vec<Vec<f64>>,
}

impl TruthFile {
    pub fn from_simulated(sim: &SimulatedPanel) -> Self {
        Self {
            r: sim.config.r,
            loadings: matrix_to_rows(&sim.loadings),
            factors: matrix_to_rows(&sim.factors),
        }
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| Error::Parse(format!("cannot serialize truth: {e}")))
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        serde_json::from_reader(reader)
            .map_err(|e| Error::Parse(format!("cannot parse truth: {e}")))
    }
}
