//! Datasets, synthetic generators, split protocols and file formats.
//!
//! A [`Dataset`] holds the three kinds of training data: labeled pairs
//! `(x, y)`, unlabeled observations `x`, and unfeatured compositions `y`
//! (optionally with an observed nuisance `z`).

mod digits;
mod idx;
mod synth;

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

pub use digits::{make_partial_label_split, render_digits, DigitImages, PartialLabelCounts};
pub use idx::{encode_idx, load_idx, parse_idx, read_idx, write_idx, IdxData};
pub use synth::{
    endmember_signatures, generate_grouped_mixtures, generate_synthetic_mixtures, inject_outliers, make_group_split, make_simplex_split, simplex_grid,
    Mixing, MixtureSpec, SampleTable, SplitCounts,
};

/// Tolerance for simplex membership of compositions.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data spec field `{field}`: {reason}")]
    Spec { field: String, reason: String },
    #[error("infeasible split: {0}")]
    Infeasible(String),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

pub(crate) fn spec_err(field: &str, reason: impl Into<String>) -> DataError {
    DataError::Spec {
        field: field.to_owned(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl std::fmt::Display) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Per-channel affine map `x' = (x - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.map_rows(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        self.map_rows(x, |v, m, s| v * s + m)
    }

    fn map_rows(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let mut out = x.as_matrix();
        let d = self.mean.len();
        if out.is_empty() {
            return out;
        }
        for row in out.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(*v, self.mean[j], self.scale[j]);
            }
        }
        out
    }

    /// Composes `self` after `inner`: the result maps raw data the way
    /// applying `inner` then `self` does.
    pub fn after(&self, inner: &Standardization) -> Self {
        Self {
            mean: inner.mean.iter().zip(&inner.scale).zip(&self.mean).map(|((m, s), m2)| m + s * m2).collect(),
            scale: inner.scale.iter().zip(&self.scale).map(|(a, b)| a * b).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Labeled observations, one row per item.
    pub labeled_x: Tensor,
    pub labeled_y: Tensor,
    pub unlabeled_x: Tensor,
    pub unfeatured_y: Tensor,
    pub unfeatured_z: Option<Tensor>,
    /// Transform already applied to every `x`; identity when raw.
    pub standardization: Standardization,
    /// Source-table rows of the labeled and unlabeled items, when known.
    pub labeled_rows: Vec<usize>,
    pub unlabeled_rows: Vec<usize>,
}

/// Sidecar metadata written next to the CSV files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub x_dim: usize,
    pub y_dim: usize,
    pub z_dim: usize,
    pub seed: u64,
    pub standardization: Standardization,
    #[serde(default)]
    pub labeled_rows: Vec<usize>,
    #[serde(default)]
    pub unlabeled_rows: Vec<usize>,
    /// Generator description (mixture spec, digit protocol, ...).
    #[serde(default)]
    pub spec: serde_json::Value,
}

fn rows_of(t: &Tensor) -> usize {
    if t.is_empty() {
        0
    } else {
        t.rows()
    }
}

impl Dataset {
    pub fn empty(x_dim: usize, y_dim: usize) -> Self {
        Self {
            labeled_x: Tensor::zeros(&[0, x_dim]),
            labeled_y: Tensor::zeros(&[0, y_dim]),
            unlabeled_x: Tensor::zeros(&[0, x_dim]),
            unfeatured_y: Tensor::zeros(&[0, y_dim]),
            unfeatured_z: None,
            standardization: Standardization::identity(x_dim),
            labeled_rows: Vec::new(),
            unlabeled_rows: Vec::new(),
        }
    }

    pub fn x_dim(&self) -> usize {
        self.standardization.mean.len()
    }

    pub fn y_dim(&self) -> usize {
        self.labeled_y.shape().last().copied().unwrap_or(0)
    }

    /// (labeled, unlabeled, unfeatured) item counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (rows_of(&self.labeled_x), rows_of(&self.unlabeled_x), rows_of(&self.unfeatured_y))
    }

    pub fn is_empty(&self) -> bool {
        self.counts() == (0, 0, 0)
    }

    /// Checks simplex membership, finiteness and the z support.
    pub fn validate(&self, z_support: Option<(f64, f64)>) -> Result<(), DataError> {
        let (nl, _, ny) = self.counts();
        if rows_of(&self.labeled_y) != nl {
            return Err(DataError::Invariant("labeled x and y row counts differ".into()));
        }
        for (what, t) in [("labeled x", &self.labeled_x), ("unlabeled x", &self.unlabeled_x)] {
            if !t.is_finite() {
                return Err(DataError::Invariant(format!("{what} has non-finite values")));
            }
        }
        for (what, t) in [("labeled y", &self.labeled_y), ("unfeatured y", &self.unfeatured_y)] {
            if t.is_empty() {
                continue;
            }
            for (i, row) in t.row_iter().enumerate() {
                let s: f64 = row.iter().sum();
                if row.iter().any(|v| *v < -SIMPLEX_TOL || !v.is_finite()) || (s - 1.0).abs() > SIMPLEX_TOL {
                    return Err(DataError::Invariant(format!("{what} row {i} is off the simplex")));
                }
            }
        }
        if let Some(z) = &self.unfeatured_z {
            if rows_of(z) != ny {
                return Err(DataError::Invariant("one z is needed per unfeatured composition".into()));
            }
            if let Some((lo, hi)) = z_support {
                if z.data().iter().any(|v| !(lo..=hi).contains(v)) {
                    return Err(DataError::Invariant("unfeatured z outside the prior support".into()));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, seed: u64, spec: serde_json::Value) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let xd = self.x_dim();
        let yd = self.y_dim();
        let xs: Vec<String> = (0..xd).map(|j| format!("x{j}")).collect();
        let ys: Vec<String> = (0..yd).map(|j| format!("y{j}")).collect();
        let z_dim = self.unfeatured_z.as_ref().map_or(0, |z| z.shape().last().copied().unwrap_or(0));
        let zs: Vec<String> = (0..z_dim).map(|j| format!("z{j}")).collect();

        write_csv(&dir.join("labeled.csv"), &[&xs[..], &ys[..]].concat(), &[&self.labeled_x, &self.labeled_y])?;
        write_csv(&dir.join("unlabeled.csv"), &xs, &[&self.unlabeled_x])?;
        match &self.unfeatured_z {
            Some(z) => write_csv(&dir.join("unfeatured.csv"), &[&ys[..], &zs[..]].concat(), &[&self.unfeatured_y, z])?,
            None => write_csv(&dir.join("unfeatured.csv"), &ys, &[&self.unfeatured_y])?,
        }
        let meta = DatasetMeta {
            x_dim: xd,
            y_dim: yd,
            z_dim,
            seed,
            standardization: self.standardization.clone(),
            labeled_rows: self.labeled_rows.clone(),
            unlabeled_rows: self.unlabeled_rows.clone(),
            spec,
        };
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| format_err(&path, e))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<(Self, DatasetMeta), DataError> {
        let path = dir.join("meta.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| format_err(&path, e))?;
        let (xd, yd, zd) = (meta.x_dim, meta.y_dim, meta.z_dim);
        let mut labeled = read_csv(&dir.join("labeled.csv"), &[xd, yd])?;
        let labeled_y = labeled.pop().unwrap();
        let labeled_x = labeled.pop().unwrap();
        let unlabeled_x = read_csv(&dir.join("unlabeled.csv"), &[xd])?.pop().unwrap();
        let mut unf = read_csv(&dir.join("unfeatured.csv"), &[yd, zd])?;
        let z = unf.pop().unwrap();
        let unfeatured_y = unf.pop().unwrap();
        let ds = Self {
            labeled_x,
            labeled_y,
            unlabeled_x,
            unfeatured_y,
            unfeatured_z: (zd > 0).then_some(z),
            standardization: meta.standardization.clone(),
            labeled_rows: meta.labeled_rows.clone(),
            unlabeled_rows: meta.unlabeled_rows.clone(),
        };
        ds.validate(None)?;
        Ok((ds, meta))
    }
}

/// Writes the column blocks side by side. `{}` formatting of `f64` is the
/// shortest representation that round-trips exactly.
fn write_csv(path: &Path, header: &[String], blocks: &[&Tensor]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    w.write_record(header).map_err(|e| format_err(path, e))?;
    let n = rows_of(blocks[0]);
    for i in 0..n {
        let rec: Vec<String> = blocks.iter().flat_map(|b| b.row(i).iter().map(|v| v.to_string())).collect();
        w.write_record(&rec).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a CSV and splits each row into blocks of the given widths.
fn read_csv(path: &Path, widths: &[usize]) -> Result<Vec<Tensor>, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let total: usize = widths.iter().sum();
    let ncols = r.headers().map_err(|e| format_err(path, e))?.len();
    if ncols != total {
        return Err(format_err(path, format!("expected {total} columns, found {ncols}")));
    }
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); widths.len()];
    let mut n = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let mut fields = rec.iter();
        for (b, w) in widths.iter().enumerate() {
            for _ in 0..*w {
                let f = fields.next().unwrap_or("");
                let v: f64 = f.trim().parse().map_err(|_| format_err(path, format!("row {}: bad number `{f}`", n + 1)))?;
                data[b].push(v);
            }
        }
        n += 1;
    }
    Ok(data.into_iter().zip(widths).map(|(d, w)| Tensor::matrix(n, *w, d)).collect())
}

/// Standardizes every `x` channel to zero mean and unit population scale,
/// using labeled and unlabeled observations together. A zero-variance
/// channel keeps scale 1.
pub fn standardize(ds: &Dataset) -> Result<Dataset, DataError> {
    let d = ds.x_dim();
    let rows: Vec<&[f64]> = [&ds.labeled_x, &ds.unlabeled_x]
        .into_iter()
        .filter(|t| !t.is_empty())
        .flat_map(|t| t.row_iter())
        .collect();
    if rows.is_empty() {
        return Err(DataError::Invariant("standardize needs at least one observation".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut scale = vec![0.0; d];
    for r in &rows {
        for j in 0..d {
            scale[j] += (r[j] - mean[j]).powi(2);
        }
    }
    for (j, s) in scale.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            warn!("channel {j} has zero variance; keeping scale 1");
            *s = 1.0;
        }
    }
    let st = Standardization { mean, scale };
    Ok(Dataset {
        labeled_x: st.apply(&ds.labeled_x),
        unlabeled_x: st.apply(&ds.unlabeled_x),
        standardization: st.after(&ds.standardization),
        ..ds.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let mut ds = Dataset::empty(2, 2);
        ds.labeled_x = Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 5.0]);
        ds.labeled_y = Tensor::matrix(2, 2, vec![0.25, 0.75, 1.0, 0.0]);
        ds.unlabeled_x = Tensor::matrix(1, 2, vec![2.0, 5.0]);
        ds.unfeatured_y = Tensor::matrix(1, 2, vec![0.5, 0.5]);
        ds.unfeatured_z = Some(Tensor::matrix(1, 1, vec![0.1]));
        ds
    }

    #[test]
    fn standardize_centres_and_inverts() {
        let ds = toy();
        let st = standardize(&ds).unwrap();
        for j in 0..2 {
            let m: f64 = [st.labeled_x.at(0, j), st.labeled_x.at(1, j), st.unlabeled_x.at(0, j)].iter().sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-10);
        }
        // The constant channel keeps scale 1.
        assert_eq!(st.standardization.scale[1], 1.0);
        let back = st.standardization.invert(&st.labeled_x);
        for (a, b) in back.data().iter().zip(ds.labeled_x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let again = standardize(&st).unwrap();
        for (a, b) in again.labeled_x.data().iter().zip(st.labeled_x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy();
        ds.labeled_x.data_mut()[0] = 0.1 + 0.2;
        ds.save(dir.path(), 3, serde_json::json!({"kind": "toy"})).unwrap();
        let (back, meta) = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(meta.seed, 3);
    }

    #[test]
    fn validate_rejects_off_simplex() {
        let mut ds = toy();
        ds.labeled_y.data_mut()[0] = 0.3;
        assert!(ds.validate(None).is_err());
        let mut ds = toy();
        ds.unfeatured_z = Some(Tensor::matrix(1, 1, vec![3.0]));
        assert!(ds.validate(Some((-1.5, 1.5))).is_err());
    }
}
