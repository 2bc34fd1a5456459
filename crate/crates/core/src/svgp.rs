//! Single-inducing-set sparse variational GP: uncollapsed bound, collapsed
//! bound and prediction.

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};
use crate::exact::GaussianDensity;
use crate::graph::{self, FactorVars, KernelVars};
use crate::kernels::KernelSpec;
use crate::tape::{Tape, Var};
use crate::trainer::params::{ParamBlock, Trainable, Transform};
use crate::variational::{CholeskyGaussian, GaussianLikelihood};

#[derive(Clone, Debug, PartialEq)]
pub struct SvgpState {
    pub kernel: KernelSpec,
    pub likelihood: GaussianLikelihood,
    pub z: DMatrix<f64>,
    pub q_u: CholeskyGaussian,
    pub whitened: bool,
}

impl SvgpState {
    /// State with q(u) initialized to the prior.
    pub fn new(
        kernel: KernelSpec,
        likelihood: GaussianLikelihood,
        z: DMatrix<f64>,
        whitened: bool,
    ) -> Result<Self> {
        let m = z.nrows();
        let mut state = SvgpState {
            kernel,
            likelihood,
            z,
            q_u: CholeskyGaussian::standard(m),
            whitened,
        };
        if !whitened {
            state.q_u.scale = prior_scale(&state.kernel, &state.z)?;
        }
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.z.nrows() == 0 {
            return Err(GpError::arg("at least one inducing point is required"));
        }
        if self.q_u.dim() != self.z.nrows() {
            return Err(GpError::dim(format!(
                "q(u) has dimension {} but there are {} inducing points",
                self.q_u.dim(),
                self.z.nrows()
            )));
        }
        self.q_u.validate()
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }
}

/// Lower Cholesky factor of K_uu under the jitter policy.
pub fn prior_scale(kernel: &KernelSpec, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = crate::kernels::kernel_matrix(kernel, z, z)?;
    Ok(crate::linalg::cholesky_jittered(&k)?.0)
}

pub(crate) fn check_batch(x: &DMatrix<f64>, y: &DVector<f64>, dim: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(GpError::dim(format!(
            "{} inputs but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() > 0 && x.ncols() != dim {
        return Err(GpError::dim(format!(
            "inputs have dimension {} but the model expects {dim}",
            x.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn check_scale(scale: f64) -> Result<()> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(GpError::arg(format!("minibatch scale must be >= 1, got {scale}")));
    }
    Ok(())
}

impl Trainable for SvgpState {
    fn param_blocks(&self) -> Vec<ParamBlock> {
        vec![
            ParamBlock::scalar("lengthscale", self.kernel.lengthscale),
            ParamBlock::scalar("signal_variance", self.kernel.signal_variance),
            ParamBlock::scalar("noise_variance", self.likelihood.noise_variance),
            ParamBlock::new("z", Transform::Identity, self.z.clone()),
            ParamBlock::column("m_u", &self.q_u.mean),
            ParamBlock::new("l_u", Transform::TrilSoftplus, self.q_u.scale.clone()),
        ]
    }

    fn set_param_blocks(&mut self, v: &[DMatrix<f64>]) -> Result<()> {
        if v.len() != 6 {
            return Err(GpError::dim("svgp expects 6 parameter blocks"));
        }
        self.kernel.lengthscale = v[0][(0, 0)];
        self.kernel.signal_variance = v[1][(0, 0)];
        self.likelihood.noise_variance = v[2][(0, 0)];
        self.z = v[3].clone();
        self.q_u = CholeskyGaussian {
            mean: DVector::from_column_slice(v[4].as_slice()),
            scale: v[5].lower_triangle(),
        };
        self.validate()
    }

    fn bound_graph<'t>(
        &self,
        _tape: &'t Tape,
        p: &[Var<'t>],
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        scale: f64,
        _seed: u64,
    ) -> Result<Var<'t>> {
        check_batch(x, y, self.z.ncols())?;
        check_scale(scale)?;
        let tape = p[0].tape();
        let kernel = KernelVars {
            family: self.kernel.family,
            lengthscale: p[0],
            variance: p[1],
        };
        let q_u = FactorVars {
            mean: p[4],
            scale: Some(p[5]),
            whitened: self.whitened,
        };
        let xv = tape.constant(x.clone());
        graph::uncollapsed_bound(kernel, p[2], p[3], None, &q_u, None, xv, y, scale)
    }

    fn predict_latent(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let tape = Tape::new();
        let ind = graph::inducing(
            KernelVars::constants(&tape, &self.kernel),
            tape.constant(self.z.clone()),
            None,
        )?;
        let bat = graph::batch(&ind, tape.constant(xstar.clone()))?;
        let q_u = FactorVars::constants(&tape, &self.q_u, self.whitened);
        let (mu, var) = graph::marginals(&ind, &bat, &q_u, None)?;
        Ok((graph::to_vector(mu), graph::to_vector(var)))
    }

    fn noise_variance(&self) -> f64 {
        self.likelihood.noise_variance
    }

    fn input_dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Uncollapsed SVGP bound on a batch, with the data term multiplied by
/// `scale` (N/|B| for minibatches).
pub fn svgp_bound(state: &SvgpState, x: &DMatrix<f64>, y: &DVector<f64>, scale: f64) -> Result<f64> {
    state.bound_value(x, y, scale, 0)
}

/// Collapsed bound log N(y | 0, Q_ff + σ²I) − tr(K_ff − Q_ff)/(2σ²).
/// Full batch, Gaussian likelihood.
pub fn titsias_collapsed_bound(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    likelihood: &GaussianLikelihood,
) -> Result<f64> {
    check_batch(x, y, z.ncols())?;
    let tape = Tape::new();
    let ind = graph::inducing(
        KernelVars::constants(&tape, kernel),
        tape.constant(z.clone()),
        None,
    )?;
    let bat = graph::batch(&ind, tape.constant(x.clone()))?;
    let noise = tape.scalar(likelihood.noise_variance);
    Ok(graph::collapsed_bound(&ind, &bat, None, noise, y)?.scalar_value())
}

/// Joint predictive density of the latent function at `xstar`.
pub fn svgp_predict(state: &SvgpState, xstar: &DMatrix<f64>) -> Result<GaussianDensity> {
    state.validate()?;
    if xstar.ncols() != state.z.ncols() {
        return Err(GpError::dim("test inputs have the wrong dimension"));
    }
    let tape = Tape::new();
    let ind = graph::inducing(
        KernelVars::constants(&tape, &state.kernel),
        tape.constant(state.z.clone()),
        None,
    )?;
    let q_u = FactorVars::constants(&tape, &state.q_u, state.whitened);
    let (mu, cov) = graph::predictive(&ind, tape.constant(xstar.clone()), &q_u, None)?;
    Ok(GaussianDensity {
        mean: graph::to_vector(mu),
        covariance: graph::to_matrix(cov),
    })
}
