//! Data containers, fold partitioning, CSV ingestion and run configuration.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, population_sd};

/// Response `y`, exposures of interest `x` (n x d) and controls `z` (n x p).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let x_names = (0..x.ncols()).map(|j| format!("x{}", j + 1)).collect();
        let z_names = (0..z.ncols()).map(|j| format!("z{}", j + 1)).collect();
        Self::with_names(y, x, z, x_names, z_names)
    }

    pub fn with_names(
        y: Vec<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        x_names: Vec<String>,
        z_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::Config(format!(
                "row mismatch: y has {n}, x has {}, z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Config("at least one exposure column is required".into()));
        }
        if x_names.len() != x.ncols() || z_names.len() != z.ncols() {
            return Err(Error::Config("column name count does not match data".into()));
        }
        if y.iter().chain(x.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        Ok(Self {
            y,
            x,
            z,
            x_names,
            z_names,
        })
    }

    /// Single-exposure convenience constructor.
    pub fn from_parts(y: Vec<f64>, x: Vec<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = x.len();
        Self::new(y, DMatrix::from_vec(n, 1, x), z)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn x_column(&self, j: usize) -> Vec<f64> {
        self.x.column(j).iter().copied().collect()
    }

    /// Feature row `(x_i, z_i)` as fed to the outcome regression.
    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.d() + self.p());
        row.extend(self.x.row(i).iter());
        row.extend(self.z.row(i).iter());
        row
    }

    /// Full `(x, z)` design, n x (d + p).
    pub fn features(&self) -> DMatrix<f64> {
        let (n, d, p) = (self.n(), self.d(), self.p());
        DMatrix::from_fn(n, d + p, |i, j| if j < d { self.x[(i, j)] } else { self.z[(i, j - d)] })
    }

    /// Design for the conditional law of `x_j`: all other exposures followed
    /// by the controls.
    pub fn exposure_controls(&self, j: usize) -> DMatrix<f64> {
        let (n, d, p) = (self.n(), self.d(), self.p());
        let others: Vec<usize> = (0..d).filter(|&k| k != j).collect();
        DMatrix::from_fn(n, others.len() + p, |i, c| {
            if c < others.len() {
                self.x[(i, others[c])]
            } else {
                self.z[(i, c - others.len())]
            }
        })
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select_rows(rows.iter());
        let z = self.z.select_rows(rows.iter());
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            x,
            z,
            x_names: self.x_names.clone(),
            z_names: self.z_names.clone(),
        }
    }
}

/// Column means and (population) standard deviations used by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_sd: Vec<f64>,
}

impl Standardization {
    /// Maps an APE on the standardized exposure scale back to raw units.
    pub fn unscale_theta(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.x_sd).map(|(t, s)| t / s).collect()
    }

    pub fn unscale_sigma(&self, sigma: &[Vec<f64>]) -> Vec<Vec<f64>> {
        sigma
            .iter()
            .enumerate()
            .map(|(a, row)| {
                row.iter()
                    .enumerate()
                    .map(|(b, v)| v / (self.x_sd[a] * self.x_sd[b]))
                    .collect()
            })
            .collect()
    }
}

fn standardize_matrix(m: &DMatrix<f64>, names: &[String]) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    let mut out = m.clone();
    let mut means = Vec::with_capacity(m.ncols());
    let mut sds = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        let mu = mean(&col);
        let sd = population_sd(&col);
        if !(sd > 0.0) {
            return Err(Error::DegenerateColumn(names[j].clone()));
        }
        for v in out.column_mut(j).iter_mut() {
            *v = (*v - mu) / sd;
        }
        means.push(mu);
        sds.push(sd);
    }
    Ok((out, means, sds))
}

/// Centres and scales every exposure and control column to mean 0 and
/// population standard deviation 1. The response is left untouched.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Standardization)> {
    let (x, x_mean, x_sd) = standardize_matrix(&ds.x, &ds.x_names)?;
    let (z, z_mean, z_sd) = standardize_matrix(&ds.z, &ds.z_names)?;
    Ok((
        Dataset {
            y: ds.y.clone(),
            x,
            z,
            x_names: ds.x_names.clone(),
            z_names: ds.z_names.clone(),
        },
        Standardization {
            x_mean,
            x_sd,
            z_mean,
            z_sd,
        },
    ))
}

/// Assignment of observations to `k` folds (0-based fold labels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPartition {
    assignment: Vec<usize>,
    k: usize,
}

impl FoldPartition {
    pub fn from_assignment(assignment: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {k}")));
        }
        if let Some(bad) = assignment.iter().find(|&&f| f >= k) {
            return Err(Error::Config(format!("fold label {bad} out of range for K={k}")));
        }
        Ok(Self { assignment, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn in_fold(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn out_of_fold(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Uniformly random balanced partition of `0..n` into `k` folds.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} observations for {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPartition { assignment, k })
}

/// Reads a headed CSV. `y_col` becomes the response, `x_cols` the exposures,
/// and every other column the controls in file order.
pub fn load_csv(path: impl AsRef<Path>, x_cols: &[String], y_col: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, x_cols, y_col)
}

pub fn read_csv<R: std::io::Read>(input: R, x_cols: &[String], y_col: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = find(y_col)?;
    let x_idx = x_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let z_idx: Vec<usize> = (0..headers.len())
        .filter(|c| *c != y_idx && !x_idx.contains(c))
        .collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let mut parsed = Vec::with_capacity(headers.len());
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                row: r + 1,
                column: headers[c].clone(),
                message: e.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: headers[c].clone(),
                    message: format!("non-finite value `{}`", cell.trim()),
                });
            }
            parsed.push(v);
        }
        rows.push(parsed);
    }
    let n = rows.len();
    let y = rows.iter().map(|r| r[y_idx]).collect();
    let x = DMatrix::from_fn(n, x_idx.len(), |i, j| rows[i][x_idx[j]]);
    let z = DMatrix::from_fn(n, z_idx.len(), |i, j| rows[i][z_idx[j]]);
    Dataset::with_names(
        y,
        x,
        z,
        x_idx.iter().map(|&c| headers[c].clone()).collect(),
        z_idx.iter().map(|&c| headers[c].clone()).collect(),
    )
}

/// Writes `y, x..., z...` with round-trip float formatting.
pub fn write_csv<W: std::io::Write>(ds: &Dataset, y_name: &str, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec![y_name.to_string()];
    header.extend(ds.x_names.iter().cloned());
    header.extend(ds.z_names.iter().cloned());
    writer.write_record(&header)?;
    for i in 0..ds.n() {
        let mut record = vec![format!("{:?}", ds.y[i])];
        record.extend(ds.feature_row(i).iter().map(|v| format!("{v:?}")));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}
