//! CSV readers and writers.
//!
//! Counts: a header row of column identifiers (the first header cell labels
//! the identifier column), then one row per network row whose first cell is
//! the row identifier. Cells are nonnegative integers or `NA` for pairs that
//! were never observed.
//!
//! Features: header `row,col,z1,...,zR`, one line per pair, indices 1-based.
//!
//! Dense matrices are written in the counts layout with numeric cells.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use nmix::{CountDataset, FeatureSet};

use crate::error::{CliError, Result};

/// Count matrix together with the identifiers from the file.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub data: CountDataset,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file))
}

fn records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::parse(path, format!("line {}", n + 1), e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push(rec);
    }
    Ok(out)
}

/// Row identifiers, column identifiers and parsed cells.
type Labelled<T> = (Vec<String>, Vec<String>, Vec<Vec<T>>);

/// Parse header and body of an identifier-labelled table, converting each
/// body cell with `cell`.
fn labelled_table<T, F>(path: &Path, mut cell: F) -> Result<Labelled<T>>
where
    F: FnMut(&str) -> std::result::Result<T, String>,
{
    let recs = records(path)?;
    let Some((header, body)) = recs.split_first() else {
        return Err(CliError::parse(path, "line 1", "file is empty"));
    };
    if header.len() < 2 {
        return Err(CliError::parse(path, "line 1", "header needs an identifier column and at least one data column"));
    }
    let col_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut seen = HashSet::new();
    for id in &col_ids {
        if !seen.insert(id.as_str()) {
            return Err(CliError::parse(path, "line 1", format!("duplicate column header {id:?}")));
        }
    }
    if body.is_empty() {
        return Err(CliError::parse(path, "line 2", "no data rows"));
    }
    let mut row_ids = Vec::with_capacity(body.len());
    let mut rows = Vec::with_capacity(body.len());
    let mut seen_rows = HashSet::new();
    for (n, rec) in body.iter().enumerate() {
        let line = n + 2;
        if rec.len() != header.len() {
            return Err(CliError::parse(
                path,
                format!("line {line}"),
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let id = rec[0].to_owned();
        if !seen_rows.insert(id.clone()) {
            return Err(CliError::parse(path, format!("line {line}"), format!("duplicate row identifier {id:?}")));
        }
        let mut row = Vec::with_capacity(col_ids.len());
        for (c, raw) in rec.iter().skip(1).enumerate() {
            let value = cell(raw).map_err(|msg| {
                CliError::parse(path, format!("line {line}, row {id:?}, column {:?}", col_ids[c]), msg)
            })?;
            row.push(value);
        }
        row_ids.push(id);
        rows.push(row);
    }
    Ok((row_ids, col_ids, rows))
}

pub fn load_count_table(path: &Path) -> Result<CountTable> {
    let (row_ids, col_ids, rows) = labelled_table(path, |raw| {
        if raw == "NA" {
            return Ok(None);
        }
        raw.parse::<u64>().map(Some).map_err(|_| format!("{raw:?} is not a nonnegative integer or NA"))
    })?;
    let (ni, nj) = (row_ids.len(), col_ids.len());
    let counts = DMatrix::from_fn(ni, nj, |i, j| rows[i][j].unwrap_or(0));
    let observed = DMatrix::from_fn(ni, nj, |i, j| rows[i][j].is_some());
    let data = CountDataset::new(counts, observed)?;
    Ok(CountTable { data, row_ids, col_ids })
}

pub fn load_counts(path: &Path) -> Result<CountDataset> {
    Ok(load_count_table(path)?.data)
}

/// Assemble the design matrix for an `n_rows x n_cols` grid. Every pair in
/// `observed` (every pair when `None`) must be listed; other absent pairs
/// get zero features.
pub fn load_features(
    path: &Path,
    n_rows: usize,
    n_cols: usize,
    observed: Option<&DMatrix<bool>>,
) -> Result<FeatureSet> {
    if let Some(mask) = observed {
        if mask.shape() != (n_rows, n_cols) {
            return Err(CliError::Invalid(format!(
                "observation mask is {:?}, expected ({n_rows}, {n_cols})",
                mask.shape()
            )));
        }
    }
    let recs = records(path)?;
    let Some((header, body)) = recs.split_first() else {
        return Err(CliError::parse(path, "line 1", "file is empty"));
    };
    if header.len() < 3 || &header[0] != "row" || &header[1] != "col" {
        return Err(CliError::parse(path, "line 1", "header must be row,col,z1,...,zR"));
    }
    let r = header.len() - 2;
    let mut z = DMatrix::zeros(n_rows * n_cols, r);
    let mut seen = DMatrix::from_element(n_rows, n_cols, false);
    for (n, rec) in body.iter().enumerate() {
        let line = n + 2;
        let loc = || format!("line {line}");
        if rec.len() != header.len() {
            return Err(CliError::parse(path, loc(), format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let index = |k: usize, bound: usize, what: &str| -> Result<usize> {
            let v: usize = rec[k].parse().map_err(|_| {
                CliError::parse(path, loc(), format!("{what} index {:?} is not a positive integer", &rec[k]))
            })?;
            if v == 0 || v > bound {
                return Err(CliError::parse(path, loc(), format!("{what} index {v} outside 1..={bound}")));
            }
            Ok(v - 1)
        };
        let i = index(0, n_rows, "row")?;
        let j = index(1, n_cols, "col")?;
        if seen[(i, j)] {
            return Err(CliError::parse(path, loc(), format!("duplicate pair ({}, {})", i + 1, j + 1)));
        }
        seen[(i, j)] = true;
        let row = j * n_rows + i;
        for c in 0..r {
            let raw = &rec[c + 2];
            let v: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                CliError::parse(
                    path,
                    format!("line {line}, column {:?}", &header[c + 2]),
                    format!("{raw:?} is not a finite number"),
                )
            })?;
            z[(row, c)] = v;
        }
    }
    for j in 0..n_cols {
        for i in 0..n_rows {
            let required = observed.is_none_or(|m| m[(i, j)]);
            if required && !seen[(i, j)] {
                return Err(CliError::parse(
                    path,
                    "body",
                    format!("observed pair ({}, {}) has no feature row", i + 1, j + 1),
                ));
            }
        }
    }
    Ok(FeatureSet::new(z, n_rows, n_cols)?)
}

/// Read a dense numeric matrix written by [`matrix_csv`].
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let (row_ids, col_ids, rows) = labelled_table(path, |raw| {
        raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("{raw:?} is not a finite number"))
    })?;
    Ok(DMatrix::from_fn(row_ids.len(), col_ids.len(), |i, j| rows[i][j]))
}

fn default_ids(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}{k}")).collect()
}

/// Render a matrix in the labelled layout with round-trip exact decimals.
pub fn matrix_csv(
    m: &DMatrix<f64>,
    corner: &str,
    row_ids: Option<&[String]>,
    col_ids: Option<&[String]>,
) -> Result<Vec<u8>> {
    let rows = row_ids.map(<[String]>::to_vec).unwrap_or_else(|| default_ids("r", m.nrows()));
    let cols = col_ids.map(<[String]>::to_vec).unwrap_or_else(|| default_ids("c", m.ncols()));
    if rows.len() != m.nrows() || cols.len() != m.ncols() {
        return Err(CliError::Invalid("identifier count does not match matrix shape".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once(corner.to_owned()).chain(cols);
    w.write_record(header).map_err(csv_err)?;
    for (i, id) in rows.iter().enumerate() {
        let row = m.row(i);
        let rec = std::iter::once(id.clone()).chain(row.iter().map(|x| x.to_string()));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))
}

/// Render counts in the input layout, `NA` at unobserved pairs.
pub fn counts_csv(data: &CountDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("id".to_owned()).chain(default_ids("c", data.n_cols()));
    w.write_record(header).map_err(csv_err)?;
    for i in 0..data.n_rows() {
        let cells =
            (0..data.n_cols()).map(
                |j| {
                    if data.is_observed(i, j) {
                        data.count(i, j).to_string()
                    } else {
                        "NA".to_owned()
                    }
                },
            );
        w.write_record(std::iter::once(format!("r{}", i + 1)).chain(cells)).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))
}

/// Render a design matrix in the `row,col,z1..zR` layout, one line per pair.
pub fn features_csv(features: &FeatureSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header =
        ["row".to_owned(), "col".to_owned()].into_iter().chain((1..=features.n_features()).map(|k| format!("z{k}")));
    w.write_record(header).map_err(csv_err)?;
    for j in 0..features.n_cols() {
        for i in 0..features.n_rows() {
            let row = features.z().row(features.row_index(i, j));
            let rec = [(i + 1).to_string(), (j + 1).to_string()].into_iter().chain(row.iter().map(|x| x.to_string()));
            w.write_record(rec).map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Invalid(format!("csv encoding failed: {e}"))
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}
