//! Data container, CSV ingestion, normalization, splitting and the
//! augmented covariate set `[X | W̃ | R]`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Partially observed predictive covariates. `w` holds NaN where `r` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    pub w: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Column names carried along for reporting and CSV round trips.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnNames {
    pub treatment: String,
    pub outcome: String,
    pub confounders: Vec<String>,
    pub predictive: Vec<String>,
}

impl ColumnNames {
    fn generic(p: usize, q: usize) -> Self {
        Self {
            treatment: "A".into(),
            outcome: "Y".into(),
            confounders: (1..=p).map(|j| format!("X{j}")).collect(),
            predictive: (1..=q).map(|j| format!("W{j}")).collect(),
        }
    }
}

/// Immutable table of confounders, treatment, outcome and optional
/// predictive covariates with their observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    a: DVector<f64>,
    y: DVector<f64>,
    predictive: Option<Predictive>,
    names: ColumnNames,
}

impl Dataset {
    /// Validates and builds a dataset. Treatment entries must be exactly ±1.
    /// When `predictive` is given, unobserved entries of `w` are overwritten
    /// with NaN so that only the mask carries information.
    pub fn new(
        x: DMatrix<f64>,
        a: DVector<f64>,
        y: DVector<f64>,
        predictive: Option<Predictive>,
    ) -> Result<Self> {
        let names = ColumnNames::generic(
            x.ncols(),
            predictive.as_ref().map_or(0, |p| p.w.ncols()),
        );
        Self::with_names(x, a, y, predictive, names)
    }

    pub fn with_names(
        x: DMatrix<f64>,
        a: DVector<f64>,
        y: DVector<f64>,
        predictive: Option<Predictive>,
        names: ColumnNames,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        if a.len() != n {
            return Err(Error::DimensionMismatch { what: "treatment", expected: n, got: a.len() });
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch { what: "outcome", expected: n, got: y.len() });
        }
        if names.confounders.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                what: "confounder names",
                expected: x.ncols(),
                got: names.confounders.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite confounder value".into()));
        }
        if let Some(bad) = a.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidTreatment(*bad));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite outcome value".into()));
        }
        let predictive = match predictive {
            None => None,
            Some(Predictive { mut w, r }) => {
                if w.nrows() != n || r.shape() != w.shape() {
                    return Err(Error::DimensionMismatch {
                        what: "predictive covariates",
                        expected: n,
                        got: w.nrows().min(r.nrows()),
                    });
                }
                if names.predictive.len() != w.ncols() {
                    return Err(Error::DimensionMismatch {
                        what: "predictive names",
                        expected: w.ncols(),
                        got: names.predictive.len(),
                    });
                }
                for j in 0..w.ncols() {
                    let mut observed = 0usize;
                    for i in 0..n {
                        match r[(i, j)] {
                            v if v == 1.0 => {
                                if !w[(i, j)].is_finite() {
                                    return Err(Error::InvalidData(format!(
                                        "observed predictive value at ({i}, {j}) is not finite"
                                    )));
                                }
                                observed += 1;
                            }
                            v if v == 0.0 => w[(i, j)] = f64::NAN,
                            v => {
                                return Err(Error::InvalidData(format!(
                                    "mask entry {v} at ({i}, {j}) is not 0/1"
                                )))
                            }
                        }
                    }
                    if observed == 0 {
                        return Err(Error::InvalidData(format!(
                            "predictive column {j} is never observed"
                        )));
                    }
                }
                if w.ncols() == 0 {
                    None
                } else {
                    Some(Predictive { w, r })
                }
            }
        };
        Ok(Self { x, a, y, predictive, names })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of confounders.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of predictive covariates (0 when absent).
    pub fn q(&self) -> usize {
        self.predictive.as_ref().map_or(0, |p| p.w.ncols())
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn predictive(&self) -> Option<&Predictive> {
        self.predictive.as_ref()
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    pub fn mean_outcome(&self) -> f64 {
        self.y.mean()
    }

    /// Fraction of missing predictive cells.
    pub fn missing_rate(&self) -> f64 {
        match &self.predictive {
            None => 0.0,
            Some(p) => 1.0 - p.r.mean(),
        }
    }

    /// Rows `idx` in the given order (duplicates allowed, as in bootstrap).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let x = self.x.select_rows(idx);
        let a = self.a.select_rows(idx);
        let y = self.y.select_rows(idx);
        let predictive = self.predictive.as_ref().map(|p| Predictive {
            w: p.w.select_rows(idx),
            r: p.r.select_rows(idx),
        });
        Self::with_names(x, a, y, predictive, self.names.clone())
    }

    /// Same rows and covariates with a replacement outcome vector.
    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Self> {
        Self::with_names(self.x.clone(), self.a.clone(), y, self.predictive.clone(), self.names.clone())
    }

    /// Same rows and covariates with a replacement treatment vector.
    pub fn with_treatment(&self, a: DVector<f64>) -> Result<Self> {
        Self::with_names(self.x.clone(), a, self.y.clone(), self.predictive.clone(), self.names.clone())
    }

    /// Writes the dataset with a header row; missing predictive cells are
    /// left empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec![self.names.treatment.clone(), self.names.outcome.clone()];
        header.extend(self.names.confounders.iter().cloned());
        header.extend(self.names.predictive.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format!("{}", self.a[i]), format!("{}", self.y[i])];
            rec.extend(self.x.row(i).iter().map(|v| format!("{v}")));
            if let Some(p) = &self.predictive {
                for j in 0..p.w.ncols() {
                    rec.push(if p.r[(i, j)] == 1.0 { format!("{}", p.w[(i, j)]) } else { String::new() });
                }
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Ok(())
    }
}

/// Maps CSV columns to their roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub treatment: String,
    pub outcome: String,
    pub confounders: Vec<String>,
    pub predictive: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

fn parse_cell(cell: &str, column: &str, row: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
        column: column.to_string(),
        row,
        value: cell.to_string(),
    })
}

/// Reads a CSV under `schema`. Treatment may be coded 0/1 (0 becomes -1) or
/// -1/+1. Empty and `NA` cells are allowed only in predictive columns.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    if schema.confounders.is_empty() {
        return Err(Error::InvalidArgument("schema needs at least one confounder".into()));
    }
    let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let a_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let x_cols = schema.confounders.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let w_cols = schema.predictive.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut w = Vec::new();
    let mut r = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let mandatory = |col: usize, name: &str| -> Result<f64> {
            let cell = rec.get(col).unwrap_or("");
            if is_missing(cell) {
                return Err(Error::MissingMandatory { column: name.to_string(), row });
            }
            parse_cell(cell, name, row)
        };
        a.push(mandatory(a_col, &schema.treatment)?);
        y.push(mandatory(y_col, &schema.outcome)?);
        for (&c, name) in x_cols.iter().zip(&schema.confounders) {
            x.push(mandatory(c, name)?);
        }
        for (&c, name) in w_cols.iter().zip(&schema.predictive) {
            let cell = rec.get(c).unwrap_or("");
            if is_missing(cell) {
                w.push(f64::NAN);
                r.push(0.0);
            } else {
                w.push(parse_cell(cell, name, row)?);
                r.push(1.0);
            }
        }
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::InvalidData("csv has no data rows".into()));
    }
    let zero_one = a.iter().all(|&v| v == 0.0 || v == 1.0);
    for v in a.iter_mut() {
        *v = match *v {
            1.0 => 1.0,
            -1.0 if !zero_one => -1.0,
            0.0 if zero_one => -1.0,
            other => return Err(Error::InvalidTreatment(other)),
        };
    }
    if a.iter().all(|&v| v == a[0]) {
        return Err(Error::ConstantTreatment);
    }
    let p = x_cols.len();
    let q = w_cols.len();
    let predictive = (q > 0).then(|| Predictive {
        w: DMatrix::from_row_slice(n, q, &w),
        r: DMatrix::from_row_slice(n, q, &r),
    });
    Dataset::with_names(
        DMatrix::from_row_slice(n, p, &x),
        DVector::from_vec(a),
        DVector::from_vec(y),
        predictive,
        ColumnNames {
            treatment: schema.treatment.clone(),
            outcome: schema.outcome.clone(),
            confounders: schema.confounders.clone(),
            predictive: schema.predictive.clone(),
        },
    )
}

/// A covariate column addressed by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Confounder(usize),
    Predictive(usize),
}

fn standardize(values: &mut [f64], name: &str) -> Result<()> {
    let n = values.len();
    if n < 2 {
        return Err(Error::ZeroVariance(name.to_string()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance(name.to_string()));
    }
    for v in values.iter_mut() {
        *v = (*v - mean) / sd;
    }
    Ok(())
}

/// Standardizes the selected columns to sample mean 0 and sd 1 (n - 1
/// denominator). Predictive columns use observed entries only.
pub fn normalize(ds: &Dataset, columns: &[Column]) -> Result<Dataset> {
    let mut x = ds.x.clone();
    let mut predictive = ds.predictive.clone();
    for &col in columns {
        match col {
            Column::Confounder(j) => {
                if j >= ds.p() {
                    return Err(Error::DimensionMismatch { what: "confounder index", expected: ds.p(), got: j });
                }
                let mut vals: Vec<f64> = x.column(j).iter().copied().collect();
                standardize(&mut vals, &ds.names.confounders[j])?;
                x.set_column(j, &DVector::from_vec(vals));
            }
            Column::Predictive(j) => {
                let p = predictive.as_mut().ok_or(Error::NoPredictive)?;
                if j >= p.w.ncols() {
                    return Err(Error::DimensionMismatch { what: "predictive index", expected: p.w.ncols(), got: j });
                }
                let rows: Vec<usize> = (0..p.w.nrows()).filter(|&i| p.r[(i, j)] == 1.0).collect();
                let mut vals: Vec<f64> = rows.iter().map(|&i| p.w[(i, j)]).collect();
                standardize(&mut vals, &ds.names.predictive[j])?;
                for (&i, v) in rows.iter().zip(vals) {
                    p.w[(i, j)] = v;
                }
            }
        }
    }
    Dataset::with_names(x, ds.a.clone(), ds.y.clone(), predictive, ds.names.clone())
}

/// Seeded train/test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.5, seed: 0 }
    }
}

/// Row indices of the (train, test) parts, each in ascending order.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument("split needs at least two rows".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let n_train = ((n as f64 * spec.train_fraction + 0.5).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Splits into (train, test); train size is `round(n * fraction)`, half up.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.n(), spec)?;
    Ok((ds.select_rows(&train)?, ds.select_rows(&test)?))
}

/// Dataset plus imputed predictive covariates; `stacked` is `[X | W̃ | R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    base: Dataset,
    w_tilde: DMatrix<f64>,
    stacked: DMatrix<f64>,
}

impl AugmentedDataset {
    pub fn base(&self) -> &Dataset {
        &self.base
    }

    pub fn w_tilde(&self) -> &DMatrix<f64> {
        &self.w_tilde
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.stacked
    }
}

/// Builds `X† = [X | W̃ | R]`. `w_tilde` must agree with every observed entry.
pub fn augment(ds: &Dataset, w_tilde: &DMatrix<f64>) -> Result<AugmentedDataset> {
    let n = ds.n();
    let p = ds.p();
    let Some(pred) = ds.predictive() else {
        if w_tilde.ncols() != 0 {
            return Err(Error::DimensionMismatch { what: "imputed covariates", expected: 0, got: w_tilde.ncols() });
        }
        return Ok(AugmentedDataset {
            base: ds.clone(),
            w_tilde: DMatrix::zeros(n, 0),
            stacked: ds.x.clone(),
        });
    };
    let q = pred.w.ncols();
    if w_tilde.shape() != (n, q) {
        return Err(Error::DimensionMismatch { what: "imputed covariates", expected: q, got: w_tilde.ncols() });
    }
    for j in 0..q {
        for i in 0..n {
            let v = w_tilde[(i, j)];
            if !v.is_finite() {
                return Err(Error::InvalidData(format!("imputed value at ({i}, {j}) is not finite")));
            }
            if pred.r[(i, j)] == 1.0 && v != pred.w[(i, j)] {
                return Err(Error::InvalidData(format!(
                    "imputed value at ({i}, {j}) disagrees with the observed entry"
                )));
            }
        }
    }
    let mut stacked = DMatrix::zeros(n, p + 2 * q);
    stacked.columns_mut(0, p).copy_from(&ds.x);
    stacked.columns_mut(p, q).copy_from(w_tilde);
    stacked.columns_mut(p + q, q).copy_from(&pred.r);
    Ok(AugmentedDataset { base: ds.clone(), w_tilde: w_tilde.clone(), stacked })
}
