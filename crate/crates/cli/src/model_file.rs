//! JSON persistence of fitted models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nmix::{FactorModel, FitConfig, FitResult};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

/// Serialized fit. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub n_rows: usize,
    pub n_cols: usize,
    pub rank: usize,
    pub n_features: usize,
    #[serde(default)]
    pub row_ids: Vec<String>,
    #[serde(default)]
    pub col_ids: Vec<String>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Detection probabilities, `n_rows x n_cols`.
    pub p: Vec<f64>,
    pub config: FitConfig,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

impl ModelFile {
    pub fn from_fit(fit: &FitResult, row_ids: Vec<String>, col_ids: Vec<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            n_rows: fit.factors.n_rows(),
            n_cols: fit.factors.n_cols(),
            rank: fit.factors.rank(),
            n_features: fit.detection.alpha.len(),
            row_ids,
            col_ids,
            u: row_major(&fit.factors.u),
            v: row_major(&fit.factors.v),
            alpha: fit.detection.alpha.iter().copied().collect(),
            p: row_major(&fit.detection.p),
            config: fit.config_echo.clone(),
            objective_trace: fit.objective_trace.clone(),
            converged: fit.converged,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Invalid(format!(
                "unsupported model format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(CliError::Invalid(format!("model field {what} has {got} entries, expected {want}")))
            }
        };
        check("u", self.u.len(), self.n_rows * self.rank)?;
        check("v", self.v.len(), self.n_cols * self.rank)?;
        check("alpha", self.alpha.len(), self.n_features)?;
        check("p", self.p.len(), self.n_rows * self.n_cols)?;
        if !self.row_ids.is_empty() {
            check("row_ids", self.row_ids.len(), self.n_rows)?;
        }
        if !self.col_ids.is_empty() {
            check("col_ids", self.col_ids.len(), self.n_cols)?;
        }
        Ok(())
    }

    pub fn factors(&self) -> Result<FactorModel> {
        Ok(FactorModel::new(
            from_row_major(self.n_rows, self.rank, &self.u),
            from_row_major(self.n_cols, self.rank, &self.v),
        )?)
    }

    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }

    pub fn detection_p(&self) -> DMatrix<f64> {
        from_row_major(self.n_rows, self.n_cols, &self.p)
    }

    /// Expected observed counts `p * lambda`.
    pub fn predict(&self) -> Result<DMatrix<f64>> {
        Ok(self.factors()?.rates().component_mul(&self.detection_p()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Invalid(format!("model encoding failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let model: Self =
            serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
        model.validate()?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}
