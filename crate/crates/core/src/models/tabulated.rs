//! Forward models given as precomputed tables of solver outputs.
//!
//! CSV layout: `sample_index,design_index,theta_0..theta_{nθ−1},y_0..y_{ny−1}`,
//! one row per (sample, design) pair. Lookup is exact; there is no
//! interpolation between samples or designs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Shape information that accompanies a table file.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TableManifest {
    pub n_theta: usize,
    pub n_y: usize,
    pub designs: Vec<Vec<f64>>,
}

#[derive(Debug)]
pub struct TabulatedModel {
    path: PathBuf,
    n_theta: usize,
    n_y: usize,
    designs: Vec<Vec<f64>>,
    thetas: Array2<f64>,
    /// sample-major, then design, then output component
    values: Vec<f64>,
    theta_index: HashMap<Vec<u64>, usize>,
    design_index: HashMap<Vec<u64>, usize>,
}

fn key(v: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 compare equal, so they share a key
    v.iter()
        .map(|x| if *x == 0.0 { 0u64 } else { x.to_bits() })
        .collect()
}

impl TabulatedModel {
    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn n_samples(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn designs(&self) -> &[Vec<f64>] {
        &self.designs
    }

    /// Parameter rows the table was evaluated at, indexed by sample.
    pub fn thetas(&self) -> &Array2<f64> {
        &self.thetas
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, sample: usize, design: usize) -> Result<&[f64]> {
        if sample >= self.n_samples() || design >= self.designs.len() {
            return Err(Error::MissingEntry(format!(
                "(sample {sample}, design {design}) in {}",
                self.path.display()
            )));
        }
        let start = (sample * self.designs.len() + design) * self.n_y;
        Ok(&self.values[start..start + self.n_y])
    }

    pub fn sample_index(&self, theta: &[f64]) -> Option<usize> {
        self.theta_index.get(&key(theta)).copied()
    }

    pub fn design_index(&self, design: &[f64]) -> Option<usize> {
        self.design_index.get(&key(design)).copied()
    }

    /// Output at the stored sample equal to `theta` and the stored design
    /// equal to `design`.
    pub fn lookup(&self, theta: &[f64], design: &[f64]) -> Result<&[f64]> {
        let s = self.sample_index(theta).ok_or_else(|| {
            Error::MissingEntry(format!("parameter {theta:?} in {}", self.path.display()))
        })?;
        let d = self.design_index(design).ok_or_else(|| {
            Error::MissingEntry(format!("design {design:?} in {}", self.path.display()))
        })?;
        self.get(s, d)
    }
}

fn table_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Table {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn expected_header(manifest: &TableManifest) -> Vec<String> {
    let mut h = vec!["sample_index".to_string(), "design_index".to_string()];
    h.extend((0..manifest.n_theta).map(|i| format!("theta_{i}")));
    h.extend((0..manifest.n_y).map(|i| format!("y_{i}")));
    h
}

/// Loads and validates a table against its manifest.
pub fn load_tabulated_model(path: &Path, manifest: &TableManifest) -> Result<TabulatedModel> {
    if manifest.n_theta == 0 || manifest.n_y == 0 || manifest.designs.is_empty() {
        return Err(table_err(path, "manifest needs n_theta, n_y >= 1 and a design list"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => table_err(path, format!("cannot open: {e}")),
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| table_err(path, format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = expected_header(manifest);
    if header.len() == 1 && header[0].is_empty() || header.is_empty() {
        return Err(table_err(path, "no rows"));
    }
    if header != expected {
        return Err(table_err(
            path,
            format!("malformed header {header:?}, expected {expected:?}"),
        ));
    }

    let n_designs = manifest.designs.len();
    let width = manifest.n_theta + manifest.n_y;
    let mut rows: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let line = line + 2;
        let record = record.map_err(|e| table_err(path, format!("line {line}: {e}")))?;
        if record.len() != expected.len() {
            return Err(table_err(
                path,
                format!("line {line}: {} fields, expected {}", record.len(), expected.len()),
            ));
        }
        let index = |i: usize| -> Result<usize> {
            record[i]
                .parse::<usize>()
                .map_err(|_| table_err(path, format!("line {line}: bad index {:?}", &record[i])))
        };
        let (sample, design) = (index(0)?, index(1)?);
        if design >= n_designs {
            return Err(table_err(
                path,
                format!("line {line}: design_index {design} outside the {n_designs}-design list"),
            ));
        }
        let mut values = Vec::with_capacity(width);
        for field in record.iter().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|_| table_err(path, format!("line {line}: bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(table_err(path, format!("line {line}: NaN or infinite entry")));
            }
            values.push(v);
        }
        if rows.insert((sample, design), values).is_some() {
            return Err(table_err(
                path,
                format!("line {line}: duplicate key (sample {sample}, design {design})"),
            ));
        }
    }
    if rows.is_empty() {
        return Err(table_err(path, "no rows"));
    }

    let n_samples = rows.keys().map(|(s, _)| s + 1).max().unwrap_or(0);
    let mut gaps = Vec::new();
    for s in 0..n_samples {
        for d in 0..n_designs {
            if !rows.contains_key(&(s, d)) {
                gaps.push((s, d));
            }
        }
    }
    if !gaps.is_empty() {
        let mut msg = format!("{} missing (sample, design) rows:", gaps.len());
        for (s, d) in gaps.iter().take(20) {
            let _ = write!(msg, " ({s},{d})");
        }
        if gaps.len() > 20 {
            msg.push_str(" ...");
        }
        return Err(table_err(path, msg));
    }

    let mut thetas = Array2::zeros((n_samples, manifest.n_theta));
    let mut values = vec![0.0; n_samples * n_designs * manifest.n_y];
    for ((s, d), row) in &rows {
        let (theta, y) = row.split_at(manifest.n_theta);
        if *d == 0 {
            thetas.row_mut(*s).iter_mut().zip(theta).for_each(|(a, b)| *a = *b);
        } else if thetas.row(*s).iter().zip(theta).any(|(a, b)| a != b) {
            return Err(table_err(
                path,
                format!("sample {s} has different parameters at design {d}"),
            ));
        }
        let start = (s * n_designs + d) * manifest.n_y;
        values[start..start + manifest.n_y].copy_from_slice(y);
    }

    let mut theta_index = HashMap::with_capacity(n_samples);
    for (s, row) in thetas.rows().into_iter().enumerate() {
        if theta_index.insert(key(row.as_slice().expect("standard layout")), s).is_some() {
            return Err(table_err(path, format!("sample {s} repeats an earlier parameter vector")));
        }
    }
    let mut design_index = HashMap::with_capacity(n_designs);
    for (d, design) in manifest.designs.iter().enumerate() {
        if design_index.insert(key(design), d).is_some() {
            return Err(table_err(path, format!("design {d} is listed twice")));
        }
    }

    Ok(TabulatedModel {
        path: path.to_path_buf(),
        n_theta: manifest.n_theta,
        n_y: manifest.n_y,
        designs: manifest.designs.clone(),
        thetas,
        values,
        theta_index,
        design_index,
    })
}

/// Writes a table in the loader's format. `output(sample, design)` returns
/// the `n_y` outputs for that pair.
pub fn write_tabulated_csv(
    path: &Path,
    thetas: ArrayView2<'_, f64>,
    n_designs: usize,
    n_y: usize,
    mut output: impl FnMut(usize, usize) -> Vec<f64>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => table_err(path, format!("{other:?}")),
    })?;
    let manifest = TableManifest {
        n_theta: thetas.ncols(),
        n_y,
        designs: Vec::new(),
    };
    writer.write_record(expected_header(&manifest))?;
    for (s, theta) in thetas.rows().into_iter().enumerate() {
        for d in 0..n_designs {
            let y = output(s, d);
            assert_eq!(y.len(), n_y, "output closure returned the wrong dimension");
            let mut record = vec![s.to_string(), d.to_string()];
            record.extend(theta.iter().map(|v| format!("{v:?}")));
            record.extend(y.iter().map(|v| format!("{v:?}")));
            writer.write_record(&record)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
