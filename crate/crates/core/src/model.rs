//! A model of any supported kind, and its model.json form.
//!
//! Every stored number is a shortest round-trip decimal, so a saved model
//! reloads to the same bits.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deepgp::{DeepState, LayerState};
use crate::error::{GpError, Result};
use crate::kernels::KernelSpec;
use crate::solvegp::{Mode, SolveGpState};
use crate::svgp::SvgpState;
use crate::tape::{Tape, Var};
use crate::trainer::params::{ParamBlock, Trainable, Transform};
use crate::variational::{CholeskyGaussian, GaussianLikelihood, Whitening};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Svgp(SvgpState),
    /// Covers both the free and the ODVGP-frozen mode.
    SolveGp(SolveGpState),
    Deep(DeepState),
}

impl Model {
    /// The name used in configs and model.json.
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Svgp(_) => "svgp",
            Model::SolveGp(s) if s.mode == Mode::OdvgpFrozen => "odvgp",
            Model::SolveGp(_) => "solvegp",
            Model::Deep(_) => "deep_solvegp",
        }
    }

    fn inner(&self) -> &dyn Trainable {
        match self {
            Model::Svgp(s) => s,
            Model::SolveGp(s) => s,
            Model::Deep(s) => s,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Trainable {
        match self {
            Model::Svgp(s) => s,
            Model::SolveGp(s) => s,
            Model::Deep(s) => s,
        }
    }

    /// Inducing locations tagged "Z" and "O" (first layer for deep models).
    pub fn inducing_locations(&self) -> Vec<(&'static str, Vec<f64>)> {
        let rows = |tag: &'static str, m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| (tag, m.row(i).iter().copied().collect()))
                .collect::<Vec<_>>()
        };
        match self {
            Model::Svgp(s) => rows("Z", &s.z),
            Model::SolveGp(s) => [rows("Z", &s.z), rows("O", &s.o)].concat(),
            Model::Deep(d) => [rows("Z", &d.layers[0].z), rows("O", &d.layers[0].o)].concat(),
        }
    }

    pub fn to_json(&self, standardization: Option<&Standardization>) -> Result<String> {
        let saved = SavedModel {
            format: FORMAT_VERSION,
            model: ModelBody::from_model(self),
            parameters: self
                .param_vector()?
                .layout
                .into_iter()
                .map(|b| SavedBlock {
                    name: b.name,
                    transform: b.transform,
                    rows: b.rows,
                    cols: b.cols,
                })
                .collect(),
            standardization: standardization.cloned(),
        };
        Ok(serde_json::to_string_pretty(&saved)?)
    }

    /// Parses and validates a model.json document.
    pub fn from_json(text: &str) -> Result<(Model, Option<Standardization>)> {
        let saved: SavedModel = serde_json::from_str(text)?;
        if saved.format != FORMAT_VERSION {
            return Err(GpError::arg(format!("unsupported model format {}", saved.format)));
        }
        let model = saved.model.into_model()?;
        let layout: Vec<SavedBlock> = model
            .param_blocks()
            .into_iter()
            .map(|b| SavedBlock {
                name: b.name,
                transform: b.transform,
                rows: b.value.nrows(),
                cols: b.value.ncols(),
            })
            .collect();
        if layout != saved.parameters {
            return Err(GpError::arg("parameter list does not match the model"));
        }
        if let Some(s) = &saved.standardization {
            s.validate(model.input_dim())?;
        }
        Ok((model, saved.standardization))
    }

    pub fn save(&self, path: impl AsRef<Path>, standardization: Option<&Standardization>) -> Result<()> {
        std::fs::write(path, self.to_json(standardization)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Model, Option<Standardization>)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Trainable for Model {
    fn param_blocks(&self) -> Vec<ParamBlock> {
        self.inner().param_blocks()
    }

    fn set_param_blocks(&mut self, values: &[DMatrix<f64>]) -> Result<()> {
        self.inner_mut().set_param_blocks(values)
    }

    fn bound_graph<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        scale: f64,
        seed: u64,
    ) -> Result<Var<'t>> {
        self.inner().bound_graph(tape, params, x, y, scale, seed)
    }

    fn predict_latent(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.inner().predict_latent(xstar)
    }

    fn noise_variance(&self) -> f64 {
        self.inner().noise_variance()
    }

    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
}

/// Training-split statistics used to standardize inputs and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Standardization {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.x_mean.len() != dim || self.x_std.len() != dim {
            return Err(GpError::dim(format!(
                "standardization has {} columns but the model has {dim} inputs",
                self.x_mean.len()
            )));
        }
        let finite = self.x_mean.iter().chain(&self.x_std).chain([&self.y_mean, &self.y_std]);
        if finite.clone().any(|v| !v.is_finite())
            || self.x_std.iter().chain([&self.y_std]).any(|v| !(*v > 0.0))
        {
            return Err(GpError::arg("standardization statistics must be finite with positive scales"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedBlock {
    name: String,
    transform: Transform,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedModel {
    format: u32,
    model: ModelBody,
    /// Trainable blocks in optimizer order with their transforms.
    parameters: Vec<SavedBlock>,
    standardization: Option<Standardization>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "state", rename_all = "snake_case", deny_unknown_fields)]
enum ModelBody {
    Svgp {
        kernel: KernelSpec,
        likelihood: GaussianLikelihood,
        whitened: bool,
        z: SavedMatrix,
        q_u: SavedGaussian,
    },
    Solvegp(SavedSolve),
    Odvgp(SavedSolve),
    DeepSolvegp {
        likelihood: GaussianLikelihood,
        whitening: Whitening,
        num_samples: usize,
        layers: Vec<SavedLayer>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedSolve {
    kernel: KernelSpec,
    likelihood: GaussianLikelihood,
    whitening: Whitening,
    z: SavedMatrix,
    o: SavedMatrix,
    q_u: SavedGaussian,
    q_v: SavedGaussian,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedLayer {
    kernel: KernelSpec,
    z: SavedMatrix,
    o: SavedMatrix,
    q_u: Vec<SavedGaussian>,
    q_v: Vec<SavedGaussian>,
}

/// Row-major matrix.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SavedMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        SavedMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn into_matrix(self) -> Result<DMatrix<f64>> {
        if self.rows.checked_mul(self.cols) != Some(self.data.len()) {
            return Err(GpError::dim(format!(
                "matrix declared {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(GpError::arg("matrix holds a non-finite value"));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedGaussian {
    mean: Vec<f64>,
    /// Lower-triangular factor, row-major.
    scale: SavedMatrix,
}

impl SavedGaussian {
    fn from(q: &CholeskyGaussian) -> Self {
        SavedGaussian {
            mean: q.mean.as_slice().to_vec(),
            scale: SavedMatrix::from(&q.scale),
        }
    }

    fn into_gaussian(self) -> Result<CholeskyGaussian> {
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(GpError::arg("mean holds a non-finite value"));
        }
        CholeskyGaussian::new(DVector::from_vec(self.mean), self.scale.into_matrix()?)
    }
}

fn saved_solve(s: &SolveGpState) -> SavedSolve {
    SavedSolve {
        kernel: s.kernel,
        likelihood: s.likelihood,
        whitening: s.whitening,
        z: SavedMatrix::from(&s.z),
        o: SavedMatrix::from(&s.o),
        q_u: SavedGaussian::from(&s.q_u),
        q_v: SavedGaussian::from(&s.q_v),
    }
}

impl SavedSolve {
    fn into_state(self, mode: Mode) -> Result<SolveGpState> {
        self.kernel.validate()?;
        GaussianLikelihood::new(self.likelihood.noise_variance)?;
        let s = SolveGpState {
            kernel: self.kernel,
            likelihood: self.likelihood,
            z: self.z.into_matrix()?,
            o: self.o.into_matrix()?,
            q_u: self.q_u.into_gaussian()?,
            q_v: self.q_v.into_gaussian()?,
            mode,
            whitening: self.whitening,
        };
        s.validate()?;
        Ok(s)
    }
}

impl ModelBody {
    fn from_model(m: &Model) -> Self {
        match m {
            Model::Svgp(s) => ModelBody::Svgp {
                kernel: s.kernel,
                likelihood: s.likelihood,
                whitened: s.whitened,
                z: SavedMatrix::from(&s.z),
                q_u: SavedGaussian::from(&s.q_u),
            },
            Model::SolveGp(s) if s.mode == Mode::OdvgpFrozen => ModelBody::Odvgp(saved_solve(s)),
            Model::SolveGp(s) => ModelBody::Solvegp(saved_solve(s)),
            Model::Deep(d) => ModelBody::DeepSolvegp {
                likelihood: d.likelihood,
                whitening: d.whitening,
                num_samples: d.num_samples,
                layers: d
                    .layers
                    .iter()
                    .map(|l| SavedLayer {
                        kernel: l.kernel,
                        z: SavedMatrix::from(&l.z),
                        o: SavedMatrix::from(&l.o),
                        q_u: l.q_u.iter().map(SavedGaussian::from).collect(),
                        q_v: l.q_v.iter().map(SavedGaussian::from).collect(),
                    })
                    .collect(),
            },
        }
    }

    fn into_model(self) -> Result<Model> {
        Ok(match self {
            ModelBody::Svgp {
                kernel,
                likelihood,
                whitened,
                z,
                q_u,
            } => {
                kernel.validate()?;
                GaussianLikelihood::new(likelihood.noise_variance)?;
                let s = SvgpState {
                    kernel,
                    likelihood,
                    z: z.into_matrix()?,
                    q_u: q_u.into_gaussian()?,
                    whitened,
                };
                s.validate()?;
                Model::Svgp(s)
            }
            ModelBody::Solvegp(s) => Model::SolveGp(s.into_state(Mode::Free)?),
            ModelBody::Odvgp(s) => Model::SolveGp(s.into_state(Mode::OdvgpFrozen)?),
            ModelBody::DeepSolvegp {
                likelihood,
                whitening,
                num_samples,
                layers,
            } => {
                GaussianLikelihood::new(likelihood.noise_variance)?;
                let mut out = Vec::with_capacity(layers.len());
                for l in layers {
                    l.kernel.validate()?;
                    let q = |v: Vec<SavedGaussian>| v.into_iter().map(SavedGaussian::into_gaussian).collect::<Result<Vec<_>>>();
                    let layer = LayerState {
                        kernel: l.kernel,
                        z: l.z.into_matrix()?,
                        o: l.o.into_matrix()?,
                        q_u: q(l.q_u)?,
                        q_v: q(l.q_v)?,
                    };
                    if layer.q_v.len() != layer.q_u.len() {
                        return Err(GpError::dim("layer has different numbers of q(u) and q(v) factors"));
                    }
                    for c in 0..layer.width() {
                        layer.solve_state(c, likelihood, whitening)?.validate()?;
                    }
                    out.push(layer);
                }
                let mut d = DeepState::new(out, likelihood, whitening)?;
                d.num_samples = num_samples;
                d.validate()?;
                Model::Deep(d)
            }
        })
    }
}
