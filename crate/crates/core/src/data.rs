//! Datasets, standardization, train/test splits and the synthetic teacher.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{forward_unchecked, NetworkShape, ParamPoint};
use crate::numerics::{Matrix, RngState};
use crate::posterior::{Prior, VariationalPosterior};

/// Per-column affine standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Scaler {
    pub fn unstandardize_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    /// Log-density correction from standardized to original target units.
    pub fn log_jacobian(&self) -> f64 {
        -self.y_std.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    /// Present iff the data has been standardized.
    pub scaler: Option<Scaler>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        Ok(Self { x, y, scaler: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
        }
        Dataset {
            x: Matrix::from_vec(rows.len(), d, data).expect("row length matches"),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            scaler: self.scaler.clone(),
        }
    }

    /// Undo the standardization, if any.
    pub fn unstandardized(&self) -> Dataset {
        let Some(s) = &self.scaler else {
            return self.clone();
        };
        let mut x = self.x.clone();
        for r in 0..x.rows() {
            for (c, v) in x.row_mut(r).iter_mut().enumerate() {
                *v = *v * s.x_std[c] + s.x_mean[c];
            }
        }
        Dataset {
            x,
            y: self.y.iter().map(|&y| s.unstandardize_y(y)).collect(),
            scaler: None,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d = self.x.cols();
        let mut out = String::new();
        let header: Vec<String> = (0..d).map(|i| format!("x{i}")).chain(["y".to_string()]).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for n in 0..self.len() {
            for v in self.x.row(n) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.y[n]));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a comma-separated numeric file. An optional single header row is
/// detected when its first row does not parse. Negative `target_column`
/// counts from the end (`-1` is the last column).
pub fn load_csv(path: impl AsRef<Path>, target_column: i64) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, target_column)
}

pub fn parse_csv(text: &str, target_column: i64) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Vec<std::result::Result<f64, _>> = cells.iter().map(|c| c.parse::<f64>()).collect();
        if rows.is_empty() && width.is_none() && parsed.iter().any(|p| p.is_err()) {
            // header row
            width = Some(cells.len());
            continue;
        }
        let w = *width.get_or_insert(cells.len());
        if cells.len() != w {
            return Err(Error::ParseError {
                row: line_no + 1,
                col: cells.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", cells.len()),
            });
        }
        let mut row = Vec::with_capacity(w);
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::ParseError {
                        row: line_no + 1,
                        col: c + 1,
                        message: format!("non-numeric cell {:?}", cells[c]),
                    })
                }
            }
        }
        rows.push(row);
    }
    let columns = width.unwrap_or(0);
    let target = if target_column < 0 {
        columns as i64 + target_column
    } else {
        target_column
    };
    if columns < 2 || target < 0 || target >= columns as i64 {
        return Err(Error::MissingTarget {
            column: target_column,
            columns,
        });
    }
    let target = target as usize;
    let d = columns - 1;
    let mut x = Vec::with_capacity(rows.len() * d);
    let mut y = Vec::with_capacity(rows.len());
    for row in &rows {
        for (c, &v) in row.iter().enumerate() {
            if c == target {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    Dataset::new(Matrix::from_vec(rows.len(), d, x)?, y)
}

fn column_stats(values: impl Iterator<Item = f64> + Clone, what: &str) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut std = var.sqrt();
    if !(std > 0.0) {
        log::warn!("{what} is constant; using std = 1");
        std = 1.0;
    }
    (mean, std)
}

/// Fits a scaler on `train` (population std) and returns the transformed split.
pub fn standardize(train: &Dataset) -> (Scaler, Dataset) {
    let d = train.input_dim();
    let mut x_mean = Vec::with_capacity(d);
    let mut x_std = Vec::with_capacity(d);
    for c in 0..d {
        let col = (0..train.len()).map(|r| train.x[(r, c)]);
        let (m, s) = column_stats(col, &format!("input column {c}"));
        x_mean.push(m);
        x_std.push(s);
    }
    let (y_mean, y_std) = column_stats(train.y.iter().copied(), "target");
    let scaler = Scaler {
        x_mean,
        x_std,
        y_mean,
        y_std,
    };
    let out = apply_scaler(&scaler, train);
    (scaler, out)
}

pub fn apply_scaler(scaler: &Scaler, data: &Dataset) -> Dataset {
    let mut x = data.x.clone();
    for r in 0..x.rows() {
        for (c, v) in x.row_mut(r).iter_mut().enumerate() {
            *v = (*v - scaler.x_mean[c]) / scaler.x_std[c];
        }
    }
    Dataset {
        x,
        y: data.y.iter().map(|&y| (y - scaler.y_mean) / scaler.y_std).collect(),
        scaler: Some(scaler.clone()),
    }
}

/// Row indices of a seeded random train/test partition. The train split has
/// `⌈N·(1−f)⌉` rows.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = ((n as f64) * test_fraction + 1e-9).floor() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(seed).split("split", 0);
    perm.shuffle(rng.inner());
    let test = perm.split_off(n - n_test);
    Ok((perm, test))
}

pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(data.len(), test_fraction, seed)?;
    Ok((data.subset(&tr), data.subset(&te)))
}

/// Generator for correctly specified synthetic regression data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub shape: NetworkShape,
    pub prior: Prior,
    /// Sampled from the prior when absent.
    pub true_params: Option<ParamPoint>,
    pub noise_std: f64,
    pub input_low: f64,
    pub input_high: f64,
}

impl TeacherSpec {
    /// 1-D inputs on `[−4, 4]`, 50 hidden units, unit prior, noise 0.1.
    pub fn default_synthetic() -> Self {
        Self {
            shape: NetworkShape {
                input_dim: 1,
                hidden_units: 50,
            },
            prior: Prior::unit(),
            true_params: None,
            noise_std: 0.1,
            input_low: -4.0,
            input_high: 4.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !(self.input_low < self.input_high) {
            return Err(Error::InvalidConfig(format!(
                "teacher needs noise_std >= 0 and input_low < input_high (got {}, [{}, {}])",
                self.noise_std, self.input_low, self.input_high
            )));
        }
        Ok(())
    }
}

/// Samples a dataset of `n` points from the teacher network. The returned
/// parameters carry `log_noise_std = ln(noise_std)` (clamped at 1e-12).
pub fn generate_teacher(spec: &TeacherSpec, n: usize, rng: &mut RngState) -> Result<(Dataset, ParamPoint)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut params = match &spec.true_params {
        Some(p) => p.clone(),
        None => ParamPoint::sample_gaussian(spec.shape, spec.prior.std, &mut rng.split("teacher-weights", 0)),
    };
    params.log_noise_std = spec.noise_std.max(1e-12).ln();
    let d = params.shape().input_dim;
    let mut x_rng = rng.split("teacher-inputs", 0);
    let mut noise_rng = rng.split("teacher-noise", 0);
    let mut x = Matrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for r in 0..n {
        for v in x.row_mut(r) {
            *v = x_rng.uniform(spec.input_low, spec.input_high);
        }
        let clean = forward_unchecked(&params, x.row(r));
        y.push(clean + spec.noise_std * noise_rng.std_normal());
    }
    Ok((Dataset::new(x, y)?, params))
}

/// Mean-field posterior centred on the teacher weights with every σ = `sigma_init`.
pub fn init_at_truth(teacher: &ParamPoint, sigma_init: f64) -> Result<VariationalPosterior> {
    if !(sigma_init > 0.0 && sigma_init.is_finite()) {
        return Err(Error::InvalidSigmaInit(sigma_init));
    }
    let n = teacher.shape().n_params();
    Ok(VariationalPosterior::Mf {
        mean: teacher.clone(),
        rho: vec![sigma_init.ln(); n],
    })
}
