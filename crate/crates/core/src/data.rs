//! Datasets: CSV ingestion, seeded splits with standardization, and the
//! synthetic generators used by the demo and the tests.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{GpError, Result};
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::linalg::cholesky_jittered;

/// Columns as read from a file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Standardized inputs and targets for every row, with the statistics
/// needed to undo the transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    pub split: Split,
}

impl Dataset {
    /// Dataset in original units (identity standardization) with the given
    /// split.
    pub fn unscaled(x: DMatrix<f64>, y: DVector<f64>, split: Split) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::dim(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        let d = x.ncols();
        let ds = Dataset {
            x,
            y,
            x_mean: vec![0.0; d],
            x_std: vec![1.0; d],
            y_mean: 0.0,
            y_std: 1.0,
            split,
        };
        ds.check_split()?;
        Ok(ds)
    }

    fn check_split(&self) -> Result<()> {
        let n = self.y.len();
        let mut seen = vec![false; n];
        for &i in self.split.train.iter().chain(&self.split.validation).chain(&self.split.test) {
            if i >= n || seen[i] {
                return Err(GpError::arg(format!("split index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(idx.len(), self.x.ncols(), |i, j| self.x[(idx[i], j)]);
        let y = DVector::from_fn(idx.len(), |i, _| self.y[idx[i]]);
        (x, y)
    }

    pub fn train(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.rows(&self.split.train)
    }

    pub fn validation(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.rows(&self.split.validation)
    }

    pub fn test(&self) -> (DMatrix<f64>, DVector<f64>) {
        self.rows(&self.split.test)
    }

    /// Inputs back in original units.
    pub fn unstandardize_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.x_std[j] + self.x_mean[j])
    }

    pub fn standardize_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn unstandardize_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }
}

/// Fisher–Yates shuffle of 0..n driven by ChaCha8 seeded with `seed`.
/// Index j for position i is ⌊u·(i+1) / 2⁶⁴⌋ with u the next 64-bit output,
/// which keeps the permutation independent of any library sampling code.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    shuffle_with(&mut p, &mut rng);
    p
}

pub(crate) fn shuffle_with(p: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..p.len()).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        p.swap(i, j);
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // Constant columns are left unscaled.
    let std = if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 };
    (mean, std)
}

/// Seeded shuffle, split by `fractions` ((train, test) or (train,
/// validation, test)), then standardization of every column of X and of y
/// by training statistics (population standard deviation).
pub fn standardize_and_split(raw: &RawDataset, seed: u64, fractions: &[f64]) -> Result<Dataset> {
    let n = raw.y.len();
    if raw.x.nrows() != n {
        return Err(GpError::dim("inputs and targets have different lengths"));
    }
    if !(2..=3).contains(&fractions.len()) || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(GpError::arg("fractions must be (train, test) or (train, validation, test)"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(GpError::arg("fractions must sum to 1"));
    }
    let perm = permutation(n, seed);
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = if fractions.len() == 3 {
        (fractions[1] * n as f64).round() as usize
    } else {
        0
    };
    if n_train < 1 || n_train + n_val >= n || (fractions.len() == 3 && n_val < 1) {
        return Err(GpError::arg(format!(
            "fractions {fractions:?} leave a split with no points out of {n}"
        )));
    }
    let split = Split {
        train: perm[..n_train].to_vec(),
        validation: perm[n_train..n_train + n_val].to_vec(),
        test: perm[n_train + n_val..].to_vec(),
    };
    let d = raw.x.ncols();
    let mut x_mean = Vec::with_capacity(d);
    let mut x_std = Vec::with_capacity(d);
    for j in 0..d {
        let (m, s) = mean_std(split.train.iter().map(|&i| raw.x[(i, j)]));
        x_mean.push(m);
        x_std.push(s);
    }
    let (y_mean, y_std) = mean_std(split.train.iter().map(|&i| raw.y[i]));
    let x = DMatrix::from_fn(n, d, |i, j| (raw.x[(i, j)] - x_mean[j]) / x_std[j]);
    let y = raw.y.map(|v| (v - y_mean) / y_std);
    Ok(Dataset {
        x,
        y,
        x_mean,
        x_std,
        y_mean,
        y_std,
        split,
    })
}

/// Parses comma-separated data with a header row. X holds every column
/// except `target`, in file order. Rows in errors are file line numbers
/// (the header is row 1).
pub fn parse_csv(reader: impl Read, target: &str) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| GpError::Parse {
            row: 1,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let t = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| GpError::arg(format!("target column \"{target}\" not found")))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != t)
        .map(|(_, h)| h.clone())
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| GpError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(GpError::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| GpError::Parse {
                row,
                column: header[j].clone(),
                message: format!("\"{cell}\" is not a decimal number"),
            })?;
            if !v.is_finite() {
                return Err(GpError::Parse {
                    row,
                    column: header[j].clone(),
                    message: format!("\"{cell}\" is not finite"),
                });
            }
            if j == t {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    Ok(RawDataset {
        x: DMatrix::from_row_slice(n, feature_names.len(), &xs),
        y: DVector::from_vec(ys),
        feature_names,
        target_name: header[t].clone(),
    })
}

pub fn load_csv(path: impl AsRef<Path>, target: &str) -> Result<RawDataset> {
    parse_csv(std::fs::File::open(path)?, target)
}

/// Writes features then the target, using shortest round-trip decimals.
pub fn write_csv(path: impl AsRef<Path>, raw: &RawDataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = raw.feature_names.clone();
    header.push(raw.target_name.clone());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..raw.y.len() {
        let mut cells: Vec<String> = raw.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        cells.push(format!("{:?}", raw.y[i]));
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub const SNELSON_NOISE_STD: f64 = 0.2;

/// Smooth target of the synthetic 1D problem.
pub fn snelson_function(x: f64) -> f64 {
    (2.0 * x).sin() + 0.4 * (5.0 * x).cos()
}

/// Draws `n` inputs from two clusters, [0, 2.2] and [3.8, 6], separated by
/// a gap, with targets from [`snelson_function`] plus Gaussian noise. All
/// rows are in the training split and nothing is rescaled.
pub fn snelson_like(n: usize, seed: u64) -> Result<Dataset> {
    snelson_like_with_noise(n, SNELSON_NOISE_STD, seed)
}

pub fn snelson_like_with_noise(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(GpError::arg("snelson_like needs at least 2 points"));
    }
    if !(noise_std >= 0.0) {
        return Err(GpError::arg("noise standard deviation must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = Uniform::new(0.0, 2.2).expect("valid interval");
    let right = Uniform::new(3.8, 6.0).expect("valid interval");
    let mut xs = Vec::with_capacity(n);
    for i in 0..n {
        xs.push(if i % 2 == 0 { left.sample(&mut rng) } else { right.sample(&mut rng) });
    }
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            snelson_function(x) + noise_std * e
        })
        .collect();
    Dataset::unscaled(
        DMatrix::from_column_slice(n, 1, &xs),
        DVector::from_vec(ys),
        Split {
            train: (0..n).collect(),
            ..Split::default()
        },
    )
}

/// y = L ε + σ ε′ with L the factor of K_ff (ledger jitter).
pub fn gp_prior_sample(
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    noise_variance: f64,
    seed: u64,
) -> Result<DVector<f64>> {
    if !(noise_variance >= 0.0) {
        return Err(GpError::arg("noise variance must be non-negative"));
    }
    let (l, _) = cholesky_jittered(&kernel_matrix(kernel, x, x)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    let eps = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let eps2 = DVector::from_fn(n, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    Ok(l * eps + eps2 * noise_variance.sqrt())
}
