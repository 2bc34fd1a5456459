//! Toy-scale doubly stochastic deep SOLVE-GP with fully connected layers.
//!
//! Every layer holds `width` independent GPs that share a kernel and both
//! inducing sets. Between layers the marginals are sampled independently
//! per point and per channel; the last layer uses the closed-form Gaussian
//! expectation. Inducing inputs of layer ℓ > 0 live in the output space of
//! layer ℓ − 1. Intended limits: at most 3 layers, width 5, 64 inducing
//! points per set.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GpError, Result};
use crate::graph::{self, FactorVars, KernelVars};
use crate::kernels::KernelSpec;
use crate::solvegp::{Mode, SolveGpState};
use crate::svgp::{check_batch, check_scale};
use crate::tape::{Tape, Var};
use crate::trainer::params::{ParamBlock, Trainable, Transform};
use crate::variational::{expected_log_lik_graph, CholeskyGaussian, GaussianLikelihood, Whitening};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub kernel: KernelSpec,
    pub z: DMatrix<f64>,
    pub o: DMatrix<f64>,
    /// One factor per output channel.
    pub q_u: Vec<CholeskyGaussian>,
    pub q_v: Vec<CholeskyGaussian>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepState {
    pub layers: Vec<LayerState>,
    pub likelihood: GaussianLikelihood,
    pub whitening: Whitening,
    /// Monte Carlo samples per bound evaluation.
    pub num_samples: usize,
}

impl LayerState {
    /// Layer whose factors all equal their priors.
    pub fn prior(
        kernel: KernelSpec,
        z: DMatrix<f64>,
        o: DMatrix<f64>,
        width: usize,
        whitening: Whitening,
    ) -> Result<Self> {
        let s = SolveGpState::new(
            kernel,
            GaussianLikelihood { noise_variance: 1.0 },
            z,
            o,
            Mode::Free,
            whitening,
        )?;
        Ok(LayerState {
            kernel,
            q_u: vec![s.q_u.clone(); width],
            q_v: vec![s.q_v.clone(); width],
            z: s.z,
            o: s.o,
        })
    }

    /// Hidden layer that starts close to passing input column c mod d
    /// through to channel c, with small posterior spread.
    pub fn near_identity(
        kernel: KernelSpec,
        z: DMatrix<f64>,
        o: DMatrix<f64>,
        width: usize,
        whitening: Whitening,
    ) -> Result<Self> {
        let mut layer = Self::prior(kernel, z, o, width, whitening)?;
        let (l_u0, _) = layer.solve_state(0, GaussianLikelihood { noise_variance: 1.0 }, whitening)?.prior_scales()?;
        let d = layer.z.ncols();
        for c in 0..width {
            let target = DMatrix::from_column_slice(layer.z.nrows(), 1, layer.z.column(c % d).as_slice());
            let mean = if whitening.u {
                crate::linalg::solve_lower(&l_u0, &target)?
            } else {
                target
            };
            layer.q_u[c].mean = DVector::from_column_slice(mean.as_slice());
            layer.q_u[c].scale *= 1e-3;
            layer.q_v[c].scale *= 1e-3;
        }
        Ok(layer)
    }

    pub fn width(&self) -> usize {
        self.q_u.len()
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Channel `c` of this layer as a single-output SOLVE-GP state.
    pub fn solve_state(&self, c: usize, likelihood: GaussianLikelihood, whitening: Whitening) -> Result<SolveGpState> {
        if c >= self.width() {
            return Err(GpError::arg(format!("channel {c} out of range")));
        }
        Ok(SolveGpState {
            kernel: self.kernel,
            likelihood,
            z: self.z.clone(),
            o: self.o.clone(),
            q_u: self.q_u[c].clone(),
            q_v: self.q_v[c].clone(),
            mode: Mode::Free,
            whitening,
        })
    }
}

impl DeepState {
    pub fn new(layers: Vec<LayerState>, likelihood: GaussianLikelihood, whitening: Whitening) -> Result<Self> {
        let s = DeepState {
            layers,
            likelihood,
            whitening,
            num_samples: 1,
        };
        s.validate()?;
        Ok(s)
    }

    /// A one-layer deep model equivalent to `state` (free mode only).
    pub fn from_single(state: &SolveGpState) -> Result<Self> {
        if state.mode != Mode::Free {
            return Err(GpError::arg("deep layers do not support the frozen q(v) mode"));
        }
        Self::new(
            vec![LayerState {
                kernel: state.kernel,
                z: state.z.clone(),
                o: state.o.clone(),
                q_u: vec![state.q_u.clone()],
                q_v: vec![state.q_v.clone()],
            }],
            state.likelihood,
            state.whitening,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| GpError::arg("a deep model needs at least one layer"))?;
        if last.width() != 1 {
            return Err(GpError::arg("the last layer must have width 1"));
        }
        if self.num_samples == 0 {
            return Err(GpError::arg("num_samples must be at least 1"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.width() == 0 || l.q_v.len() != l.width() {
                return Err(GpError::dim(format!("layer {i}: inconsistent factor counts")));
            }
            if i > 0 && l.input_dim() != self.layers[i - 1].width() {
                return Err(GpError::dim(format!(
                    "layer {i} expects inputs of dimension {} but layer {} has width {}",
                    l.input_dim(),
                    i - 1,
                    self.layers[i - 1].width()
                )));
            }
            for c in 0..l.width() {
                l.solve_state(c, self.likelihood, self.whitening)?.validate()?;
            }
        }
        Ok(())
    }

    fn constant_params<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.param_blocks()
            .into_iter()
            .map(|b| tape.constant(b.value))
            .collect()
    }
}

/// Parameter nodes of one layer, in block order.
struct LayerVars<'t> {
    kernel: KernelVars<'t>,
    z: Var<'t>,
    o: Var<'t>,
    q_u: Vec<FactorVars<'t>>,
    q_v: Vec<FactorVars<'t>>,
}

fn layer_vars<'t>(state: &DeepState, p: &[Var<'t>]) -> Vec<LayerVars<'t>> {
    let mut at = 1;
    let mut out = Vec::with_capacity(state.layers.len());
    for l in &state.layers {
        let kernel = KernelVars {
            family: l.kernel.family,
            lengthscale: p[at],
            variance: p[at + 1],
        };
        let (z, o) = (p[at + 2], p[at + 3]);
        at += 4;
        let mut q_u = Vec::new();
        let mut q_v = Vec::new();
        for _ in 0..l.width() {
            q_u.push(FactorVars {
                mean: p[at],
                scale: Some(p[at + 1]),
                whitened: state.whitening.u,
            });
            q_v.push(FactorVars {
                mean: p[at + 2],
                scale: Some(p[at + 3]),
                whitened: state.whitening.v,
            });
            at += 4;
        }
        out.push(LayerVars { kernel, z, o, q_u, q_v });
    }
    out
}

fn normal_column(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(rng))
}

/// Samples of every layer's output, plus the final layer's marginals at
/// the sampled inputs and the layers' KL sum.
struct Forward<'t> {
    hidden: Vec<Var<'t>>,
    mu: Var<'t>,
    var: Var<'t>,
}

fn forward<'t>(layers: &[LayerVars<'t>], x: Var<'t>, rng: &mut ChaCha8Rng) -> Result<Forward<'t>> {
    let tape = x.tape();
    let mut h = x;
    let mut hidden = Vec::new();
    let n = x.shape().0;
    for (i, l) in layers.iter().enumerate() {
        let ind = graph::inducing(l.kernel, l.z, Some(l.o))?;
        let bat = graph::batch(&ind, h)?;
        if i + 1 == layers.len() {
            let (mu, var) = graph::marginals(&ind, &bat, &l.q_u[0], Some(&l.q_v[0]))?;
            return Ok(Forward { hidden, mu, var });
        }
        let mut cols = Vec::with_capacity(l.q_u.len());
        for (qu, qv) in l.q_u.iter().zip(&l.q_v) {
            let (mu, var) = graph::marginals(&ind, &bat, qu, Some(qv))?;
            let eps = tape.constant(normal_column(rng, n));
            cols.push(mu + var.sqrt_clamped().hadamard(eps));
        }
        h = tape.hstack(&cols);
        hidden.push(h);
    }
    Err(GpError::arg("a deep model needs at least one layer"))
}

fn kl_sum<'t>(layers: &[LayerVars<'t>]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for l in layers {
        let ind = graph::inducing(l.kernel, l.z, Some(l.o))?;
        for (qu, qv) in l.q_u.iter().zip(&l.q_v) {
            let mut kl = graph::kl_u(&ind, qu)?;
            if let Some(klv) = graph::kl_v(&ind, qv)? {
                kl = kl + klv;
            }
            total = Some(match total {
                Some(t) => t + kl,
                None => kl,
            });
        }
    }
    total.ok_or_else(|| GpError::arg("a deep model needs at least one layer"))
}

impl Trainable for DeepState {
    fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = vec![ParamBlock::scalar("noise_variance", self.likelihood.noise_variance)];
        for (i, l) in self.layers.iter().enumerate() {
            blocks.push(ParamBlock::scalar(format!("layer{i}.lengthscale"), l.kernel.lengthscale));
            blocks.push(ParamBlock::scalar(
                format!("layer{i}.signal_variance"),
                l.kernel.signal_variance,
            ));
            blocks.push(ParamBlock::new(format!("layer{i}.z"), Transform::Identity, l.z.clone()));
            blocks.push(ParamBlock::new(format!("layer{i}.o"), Transform::Identity, l.o.clone()));
            for (c, (qu, qv)) in l.q_u.iter().zip(&l.q_v).enumerate() {
                blocks.push(ParamBlock::column(format!("layer{i}.m_u[{c}]"), &qu.mean));
                blocks.push(ParamBlock::new(
                    format!("layer{i}.l_u[{c}]"),
                    Transform::TrilSoftplus,
                    qu.scale.clone(),
                ));
                blocks.push(ParamBlock::column(format!("layer{i}.m_v[{c}]"), &qv.mean));
                blocks.push(ParamBlock::new(
                    format!("layer{i}.l_v[{c}]"),
                    Transform::TrilSoftplus,
                    qv.scale.clone(),
                ));
            }
        }
        blocks
    }

    fn set_param_blocks(&mut self, v: &[DMatrix<f64>]) -> Result<()> {
        let expected = 1 + self.layers.iter().map(|l| 4 + 4 * l.width()).sum::<usize>();
        if v.len() != expected {
            return Err(GpError::dim(format!("deep model expects {expected} parameter blocks")));
        }
        self.likelihood.noise_variance = v[0][(0, 0)];
        let mut at = 1;
        for l in &mut self.layers {
            l.kernel.lengthscale = v[at][(0, 0)];
            l.kernel.signal_variance = v[at + 1][(0, 0)];
            l.z = v[at + 2].clone();
            l.o = v[at + 3].clone();
            at += 4;
            for c in 0..l.q_u.len() {
                l.q_u[c] = CholeskyGaussian {
                    mean: DVector::from_column_slice(v[at].as_slice()),
                    scale: v[at + 1].lower_triangle(),
                };
                l.q_v[c] = CholeskyGaussian {
                    mean: DVector::from_column_slice(v[at + 2].as_slice()),
                    scale: v[at + 3].lower_triangle(),
                };
                at += 4;
            }
        }
        self.validate()
    }

    fn bound_graph<'t>(
        &self,
        _tape: &'t Tape,
        p: &[Var<'t>],
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        scale: f64,
        seed: u64,
    ) -> Result<Var<'t>> {
        check_batch(x, y, self.layers[0].input_dim())?;
        check_scale(scale)?;
        let tape = p[0].tape();
        let layers = layer_vars(self, p);
        let kl = kl_sum(&layers)?;
        if y.is_empty() {
            return Ok(-kl);
        }
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // A single layer has nothing to sample: one pass is exact.
        let samples = if self.layers.len() == 1 { 1 } else { self.num_samples };
        let mut data: Option<Var<'t>> = None;
        for _ in 0..samples {
            let f = forward(&layers, xv, &mut rng)?;
            let ell = expected_log_lik_graph(y, f.mu, f.var, p[0]);
            data = Some(match data {
                Some(d) => d + ell,
                None => ell,
            });
        }
        let data = data.expect("at least one sample").scale(scale / samples as f64);
        Ok(data - kl)
    }

    fn predict_latent(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let samples = if self.layers.len() == 1 { 1 } else { self.num_samples.max(64) };
        let tape = Tape::new();
        let p = self.constant_params(&tape);
        let layers = layer_vars(self, &p);
        let xv = tape.constant(xstar.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = xstar.nrows();
        let mut first = DVector::zeros(n);
        let mut second = DVector::zeros(n);
        for _ in 0..samples {
            let f = forward(&layers, xv, &mut rng)?;
            let (mu, var) = (graph::to_vector(f.mu), graph::to_vector(f.var));
            first += &mu;
            second += var + mu.component_mul(&mu);
        }
        let mean = first / samples as f64;
        let var = second / samples as f64 - mean.component_mul(&mean);
        Ok((mean, var.map(|v| v.max(0.0))))
    }

    fn noise_variance(&self) -> f64 {
        self.likelihood.noise_variance
    }

    fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }
}

/// Reparameterized samples of every hidden layer's output (one matrix of
/// shape N × width per layer except the last) followed by one sample of
/// the last layer's latent output. Deterministic given `seed`.
pub fn deep_forward_sample(state: &DeepState, x: &DMatrix<f64>, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    state.validate()?;
    if x.ncols() != state.layers[0].input_dim() {
        return Err(GpError::dim("inputs have the wrong dimension"));
    }
    let tape = Tape::new();
    let p = state.constant_params(&tape);
    let layers = layer_vars(state, &p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = forward(&layers, tape.constant(x.clone()), &mut rng)?;
    let mut out: Vec<_> = f.hidden.iter().map(|h| graph::to_matrix(*h)).collect();
    let eps = normal_column(&mut rng, x.nrows());
    let mu = graph::to_matrix(f.mu);
    let sd = graph::to_matrix(f.var).map(|v| v.max(0.0).sqrt());
    out.push(mu + sd.component_mul(&eps));
    Ok(out)
}

/// Monte Carlo estimate of the deep bound with `num_samples` forward
/// passes. With one layer no sampling happens and the value equals the
/// single-layer SOLVE-GP bound.
pub fn deep_solvegp_bound(
    state: &DeepState,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    scale: f64,
    num_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut s = state.clone();
    s.num_samples = num_samples;
    s.validate()?;
    s.bound_value(x, y, scale, seed)
}

/// Per-layer KL terms (summed over channels).
pub fn layer_kls(state: &DeepState) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = state.constant_params(&tape);
    let layers = layer_vars(state, &p);
    layers
        .iter()
        .map(|l| Ok(kl_sum(std::slice::from_ref(l))?.scalar_value()))
        .collect()
}
