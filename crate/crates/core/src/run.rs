//! Run configuration and the fit / eval / plot1d commands behind the CLI.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{self, Dataset, Split};
use crate::deepgp::{DeepState, LayerState};
use crate::error::{GpError, Result};
use crate::kernels::KernelSpec;
use crate::model::{Model, Standardization};
use crate::solvegp::{Mode, SolveGpState};
use crate::svgp::SvgpState;
use crate::trainer::{train, Trainable, TrainConfig};
use crate::variational::{GaussianLikelihood, Whitening};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Svgp,
    Solvegp,
    Odvgp,
    DeepSolvegp,
}

impl ModelKind {
    pub const NAMES: [&'static str; 4] = ["svgp", "solvegp", "odvgp", "deep_solvegp"];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "svgp" => Ok(ModelKind::Svgp),
            "solvegp" => Ok(ModelKind::Solvegp),
            "odvgp" => Ok(ModelKind::Odvgp),
            "deep_solvegp" => Ok(ModelKind::DeepSolvegp),
            _ => Err(GpError::arg(format!(
                "unknown model \"{name}\" (expected one of {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        ModelKind::parse(&name).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(Self::NAMES[*self as usize])
    }
}

/// One deep layer: output width and inducing set sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub width: usize,
    pub num_inducing: usize,
    #[serde(default)]
    pub num_orthogonal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub target: String,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_fractions() -> Vec<f64> {
    vec![0.8, 0.2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorName {
    SnelsonLike,
}

/// Synthetic data: `n` training points from `seed`, `test_n` held-out
/// points from `test_seed` (default seed + 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSource {
    pub name: GeneratorName,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    #[serde(default)]
    pub test_seed: Option<u64>,
}

fn default_noise_std() -> f64 {
    data::SNELSON_NOISE_STD
}

fn default_test_n() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv(CsvSource),
    Generator(GeneratorSource),
}

fn default_kernel() -> KernelSpec {
    KernelSpec::squared_exponential(1.0, 1.0)
}

fn default_noise_variance() -> f64 {
    0.1
}

fn default_whitening() -> Whitening {
    Whitening::BOTH
}

fn default_num_samples() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Initial kernel.
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default = "default_noise_variance")]
    pub noise_variance: f64,
    /// M; unused by deep models, which size each layer separately.
    #[serde(default)]
    pub num_inducing: usize,
    /// M₂; ignored by svgp.
    #[serde(default)]
    pub num_orthogonal: usize,
    /// Deep models only, input side first; the last width must be 1.
    #[serde(default)]
    pub layers: Option<Vec<LayerConfig>>,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_whitening")]
    pub whitening: Whitening,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSource,
    /// Report metrics in the units of the data file rather than
    /// standardized units.
    #[serde(default)]
    pub original_units: bool,
    pub output_dir: PathBuf,
}

fn field_err(field: &str, why: impl fmt::Display) -> GpError {
    GpError::arg(format!("{field}: {why}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| GpError::arg(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GpError::arg(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate().map_err(|e| field_err("kernel", e))?;
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(field_err("noise_variance", "must be positive"));
        }
        if self.num_samples == 0 {
            return Err(field_err("num_samples", "must be at least 1"));
        }
        match self.model {
            ModelKind::DeepSolvegp => {
                let layers = self
                    .layers
                    .as_ref()
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| field_err("layers", "deep_solvegp needs at least one layer"))?;
                for (i, l) in layers.iter().enumerate() {
                    if l.width == 0 {
                        return Err(field_err(&format!("layers[{i}].width"), "must be at least 1"));
                    }
                    if l.num_inducing == 0 {
                        return Err(field_err(&format!("layers[{i}].num_inducing"), "must be at least 1"));
                    }
                }
                if layers.last().map(|l| l.width) != Some(1) {
                    return Err(field_err("layers", "the last layer must have width 1"));
                }
            }
            kind => {
                if self.layers.is_some() {
                    return Err(field_err("layers", format!("only deep_solvegp takes layers, not {kind}")));
                }
                if self.num_inducing == 0 {
                    return Err(field_err("num_inducing", "must be at least 1"));
                }
                if kind == ModelKind::Odvgp && self.num_orthogonal == 0 {
                    return Err(field_err("num_orthogonal", "odvgp requires at least one orthogonal inducing point"));
                }
            }
        }
        match &self.dataset {
            DatasetSource::Csv(c) => {
                if c.fractions.len() < 2 {
                    return Err(field_err("dataset.csv.fractions", "needs a test fraction"));
                }
            }
            DatasetSource::Generator(g) => {
                if g.n < 2 {
                    return Err(field_err("dataset.generator.n", "must be at least 2"));
                }
                if g.test_n == 0 {
                    return Err(field_err("dataset.generator.test_n", "must be at least 1"));
                }
                if !(g.noise_std >= 0.0) {
                    return Err(field_err("dataset.generator.noise_std", "must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Builds the dataset described by the config. Generator data is left
    /// unscaled; CSV data is standardized by training statistics.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Csv(c) => {
                let raw = data::load_csv(&c.path, &c.target)?;
                data::standardize_and_split(&raw, c.split_seed, &c.fractions)
                    .map_err(|e| field_err("dataset.csv.fractions", e))
            }
            DatasetSource::Generator(g) => {
                let train = data::snelson_like_with_noise(g.n, g.noise_std, g.seed)?;
                let test_seed = g.test_seed.unwrap_or(g.seed.wrapping_add(1));
                let test = data::snelson_like_with_noise(g.test_n.max(2), g.noise_std, test_seed)?;
                let n = g.n + g.test_n;
                let x = DMatrix::from_fn(n, 1, |i, _| if i < g.n { train.x[(i, 0)] } else { test.x[(i - g.n, 0)] });
                let y = DVector::from_fn(n, |i, _| if i < g.n { train.y[i] } else { test.y[i - g.n] });
                Dataset::unscaled(
                    x,
                    y,
                    Split {
                        train: (0..g.n).collect(),
                        validation: vec![],
                        test: (g.n..n).collect(),
                    },
                )
            }
        }
    }

    /// Model at its initialization: inducing inputs are a seeded uniform
    /// subset of the training inputs (Z first, then O, without overlap)
    /// and every variational factor equals its prior.
    pub fn initial_model(&self, x_train: &DMatrix<f64>) -> Result<Model> {
        let n = x_train.nrows();
        let lik = GaussianLikelihood::new(self.noise_variance)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(2);
        let mut perm: Vec<usize> = (0..n).collect();
        data::shuffle_with(&mut perm, &mut rng);
        let need = |m: usize, m2: usize, field: &str| {
            if m + m2 > n {
                Err(field_err(field, format!("{m} + {m2} inducing points exceed the {n} training points")))
            } else {
                Ok(())
            }
        };
        let pick = |rows: &[usize], cols: &dyn Fn(usize) -> usize, d: usize| {
            DMatrix::from_fn(rows.len(), d, |i, j| x_train[(rows[i], cols(j))])
        };
        let d = x_train.ncols();
        let same = |j: usize| j;
        let (m, m2) = (self.num_inducing, self.num_orthogonal);
        Ok(match self.model {
            ModelKind::Svgp => {
                need(m, 0, "num_inducing")?;
                Model::Svgp(SvgpState::new(self.kernel, lik, pick(&perm[..m], &same, d), self.whitening.u)?)
            }
            ModelKind::Solvegp | ModelKind::Odvgp => {
                need(m, m2, "num_orthogonal")?;
                let mode = if self.model == ModelKind::Odvgp {
                    Mode::OdvgpFrozen
                } else {
                    Mode::Free
                };
                Model::SolveGp(SolveGpState::new(
                    self.kernel,
                    lik,
                    pick(&perm[..m], &same, d),
                    pick(&perm[m..m + m2], &same, d),
                    mode,
                    self.whitening,
                )?)
            }
            ModelKind::DeepSolvegp => {
                let specs = self.layers.as_deref().unwrap_or_default();
                let mut layers = Vec::with_capacity(specs.len());
                let mut in_dim = d;
                for (i, l) in specs.iter().enumerate() {
                    need(l.num_inducing, l.num_orthogonal, &format!("layers[{i}]"))?;
                    let cols = |j: usize| j % d;
                    let z = pick(&perm[..l.num_inducing], &cols, in_dim);
                    let o = pick(&perm[l.num_inducing..l.num_inducing + l.num_orthogonal], &cols, in_dim);
                    let layer = if i + 1 == specs.len() {
                        LayerState::prior(self.kernel, z, o, l.width, self.whitening)?
                    } else {
                        LayerState::near_identity(self.kernel, z, o, l.width, self.whitening)?
                    };
                    layers.push(layer);
                    in_dim = l.width;
                }
                let mut deep = DeepState::new(layers, lik, self.whitening)?;
                deep.num_samples = self.num_samples;
                Model::Deep(deep)
            }
        })
    }
}

/// Mean per-point log N(y | μ*, σ*² + σ²) and the RMSE of μ*.
pub fn predictive_metrics(model: &Model, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    if x.ncols() != model.input_dim() {
        return Err(GpError::dim(format!(
            "data has {} input columns but the model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    if x.nrows() != y.len() || y.is_empty() {
        return Err(GpError::dim("inputs and targets must be non-empty and the same length"));
    }
    let (mu, var) = model.predict_latent(x)?;
    let s2 = model.noise_variance();
    let n = y.len() as f64;
    let mut ll = 0.0;
    let mut se = 0.0;
    for i in 0..y.len() {
        let v = var[i] + s2;
        let r = y[i] - mu[i];
        ll += -0.5 * (2.0 * PI * v).ln() - 0.5 * r * r / v;
        se += r * r;
    }
    let (ll, rmse) = (ll / n, (se / n).sqrt());
    if !ll.is_finite() || !rmse.is_finite() {
        return Err(GpError::Numerical("non-finite predictive metrics".into()));
    }
    Ok((ll, rmse))
}

fn to_units(ll: f64, rmse: f64, y_std: f64, original: bool) -> (f64, f64) {
    if original {
        (ll - y_std.ln(), rmse * y_std)
    } else {
        (ll, rmse)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    pub test_ll: f64,
    pub test_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub noise_variance: f64,
    /// One kernel per layer (a single entry for shallow models).
    pub kernels: Vec<KernelSpec>,
}

/// Contents of final.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub model: String,
    pub iterations: usize,
    pub units: String,
    pub train_ll: f64,
    pub test_ll: f64,
    pub test_rmse: f64,
    /// Full-batch bound at the final parameters.
    pub bound: f64,
    pub num_train: usize,
    pub num_test: usize,
    pub hyperparameters: Hyperparameters,
    pub adam: AdamSettings,
}

pub fn hyperparameters(model: &Model) -> Hyperparameters {
    let kernels = match model {
        Model::Svgp(s) => vec![s.kernel],
        Model::SolveGp(s) => vec![s.kernel],
        Model::Deep(d) => d.layers.iter().map(|l| l.kernel).collect(),
    };
    Hyperparameters {
        noise_variance: model.noise_variance(),
        kernels,
    }
}

fn standardization(ds: &Dataset) -> Standardization {
    Standardization {
        x_mean: ds.x_mean.clone(),
        x_std: ds.x_std.clone(),
        y_mean: ds.y_mean,
        y_std: ds.y_std,
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_FILE: &str = "final.json";
pub const MODEL_FILE: &str = "model.json";

/// Trains per the config and writes metrics.jsonl, final.json and
/// model.json into the output directory. On a numerical abort the model
/// file still holds the last parameters that evaluated cleanly.
pub fn fit(config: &RunConfig) -> Result<FinalMetrics> {
    config.validate()?;
    let ds = config.load_dataset()?;
    let (x, y) = ds.train();
    let (xt, yt) = ds.test();
    config.train.validate(x.nrows()).map_err(|e| GpError::arg(format!("train.{e}")))?;
    let mut model = config.initial_model(&x)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let stats = standardization(&ds);
    let model_path = config.output_dir.join(MODEL_FILE);
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(config.output_dir.join(METRICS_FILE))?);
    let trained = train(&mut model, &x, &y, &config.train, |r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        Ok(())
    });
    metrics.flush()?;
    model.save(&model_path, Some(&stats))?;
    trained?;

    let bound = crate::linalg::with_jitter_start(config.train.jitter_start, || {
        model.bound_value(&x, &y, 1.0, 0)
    })?;
    let (train_ll, _) = predictive_metrics(&model, &x, &y)?;
    let (test_ll, test_rmse) = predictive_metrics(&model, &xt, &yt)?;
    let (train_ll, _) = to_units(train_ll, 0.0, ds.y_std, config.original_units);
    let (test_ll, test_rmse) = to_units(test_ll, test_rmse, ds.y_std, config.original_units);
    let t = &config.train;
    let summary = FinalMetrics {
        model: model.kind_name().to_string(),
        iterations: t.iterations,
        units: if config.original_units { "original" } else { "standardized" }.to_string(),
        train_ll,
        test_ll,
        test_rmse,
        bound,
        num_train: x.nrows(),
        num_test: xt.nrows(),
        hyperparameters: hyperparameters(&model),
        adam: AdamSettings {
            learning_rate: t.learning_rate,
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            epsilon: t.adam_epsilon,
        },
    };
    std::fs::write(
        config.output_dir.join(FINAL_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

/// Test metrics of a saved model on the test split of a run config's
/// dataset, in the config's units.
pub fn eval_with_config(model_path: impl AsRef<Path>, config: &RunConfig) -> Result<EvalMetrics> {
    let (model, _) = Model::load(model_path)?;
    let ds = config.load_dataset()?;
    let (xt, yt) = ds.test();
    let (ll, rmse) = predictive_metrics(&model, &xt, &yt)?;
    let (test_ll, test_rmse) = to_units(ll, rmse, ds.y_std, config.original_units);
    Ok(EvalMetrics { test_ll, test_rmse })
}

/// Test metrics of a saved model on every row of a CSV file, standardized
/// with the statistics stored in the model.
pub fn eval_csv(
    model_path: impl AsRef<Path>,
    csv_path: impl AsRef<Path>,
    target: &str,
    original_units: bool,
) -> Result<EvalMetrics> {
    let (model, stats) = Model::load(model_path)?;
    let raw = data::load_csv(csv_path, target)?;
    let d = raw.x.ncols();
    let stats = stats.unwrap_or(Standardization {
        x_mean: vec![0.0; d],
        x_std: vec![1.0; d],
        y_mean: 0.0,
        y_std: 1.0,
    });
    if d != model.input_dim() {
        return Err(GpError::dim(format!(
            "data has {d} input columns but the model expects {}",
            model.input_dim()
        )));
    }
    let x = DMatrix::from_fn(raw.x.nrows(), d, |i, j| (raw.x[(i, j)] - stats.x_mean[j]) / stats.x_std[j]);
    let y = raw.y.map(|v| (v - stats.y_mean) / stats.y_std);
    let (ll, rmse) = predictive_metrics(&model, &x, &y)?;
    let (test_ll, test_rmse) = to_units(ll, rmse, stats.y_std, original_units);
    Ok(EvalMetrics { test_ll, test_rmse })
}

/// Evenly spaced grid in the units of the data file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.hi < self.lo || self.points == 0 {
            return Err(GpError::arg("grid needs finite lo <= hi and at least one point"));
        }
        if self.points == 1 {
            return Ok(vec![self.lo]);
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        Ok((0..self.points).map(|i| self.lo + step * i as f64).collect())
    }
}

/// One row of the band file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandRow {
    pub x: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Latent predictive mean ± 3 standard deviations (noise excluded) over
/// the grid, in original units.
pub fn band(model: &Model, stats: Option<&Standardization>, grid: &GridSpec) -> Result<Vec<BandRow>> {
    if model.input_dim() != 1 {
        return Err(GpError::arg(format!(
            "plot1d needs a model with one input, this one has {}",
            model.input_dim()
        )));
    }
    let (xm, xs, ym, ys) = match stats {
        Some(s) => (s.x_mean[0], s.x_std[0], s.y_mean, s.y_std),
        None => (0.0, 1.0, 0.0, 1.0),
    };
    let xs_grid = grid.values()?;
    let x = DMatrix::from_fn(xs_grid.len(), 1, |i, _| (xs_grid[i] - xm) / xs);
    let (mu, var) = model.predict_latent(&x)?;
    Ok(xs_grid
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let m = mu[i] * ys + ym;
            let s = var[i].sqrt() * ys;
            BandRow {
                x: g,
                mean: m,
                lo: m - 3.0 * s,
                hi: m + 3.0 * s,
            }
        })
        .collect())
}

/// Writes the band CSV (header x,mean,lo,hi) and the inducing-location CSV
/// (header tag,x with tags Z and O), both in original units.
pub fn plot1d(
    model_path: impl AsRef<Path>,
    grid: &GridSpec,
    out: impl AsRef<Path>,
    inducing_out: impl AsRef<Path>,
) -> Result<()> {
    let (model, stats) = Model::load(model_path)?;
    let rows = band(&model, stats.as_ref(), grid)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(w, "x,mean,lo,hi")?;
    for r in &rows {
        writeln!(w, "{:?},{:?},{:?},{:?}", r.x, r.mean, r.lo, r.hi)?;
    }
    w.flush()?;
    let (xm, xs) = stats.as_ref().map_or((0.0, 1.0), |s| (s.x_mean[0], s.x_std[0]));
    let mut w = std::io::BufWriter::new(std::fs::File::create(inducing_out)?);
    writeln!(w, "tag,x")?;
    for (tag, loc) in model.inducing_locations() {
        writeln!(w, "{tag},{:?}", loc[0] * xs + xm)?;
    }
    w.flush()?;
    Ok(())
}

/// Process exit code for an error: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &GpError) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}
