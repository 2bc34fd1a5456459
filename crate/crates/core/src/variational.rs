//! Gaussian variational factors, KL divergences against zero-mean priors,
//! expected Gaussian log-likelihoods and the whitening map.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::linalg;
use crate::tape::{Tape, Var};

/// Default Gauss–Hermite rule size.
pub const DEFAULT_QUADRATURE_NODES: usize = 20;

/// N(mean, scale·scaleᵀ) with `scale` lower-triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyGaussian {
    pub mean: DVector<f64>,
    pub scale: DMatrix<f64>,
}

impl CholeskyGaussian {
    pub fn new(mean: DVector<f64>, scale: DMatrix<f64>) -> Result<Self> {
        let q = CholeskyGaussian { mean, scale };
        q.validate()?;
        Ok(q)
    }

    /// N(0, I) of the given dimension.
    pub fn standard(dim: usize) -> Self {
        CholeskyGaussian {
            mean: DVector::zeros(dim),
            scale: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.scale * self.scale.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.scale.shape() != (n, n) {
            return Err(GpError::dim(format!(
                "scale is {}x{} but mean has length {n}",
                self.scale.nrows(),
                self.scale.ncols()
            )));
        }
        for i in 0..n {
            if !(self.scale[(i, i)] > 0.0) {
                return Err(GpError::arg(format!(
                    "scale diagonal entry {i} is not positive ({})",
                    self.scale[(i, i)]
                )));
            }
            for j in (i + 1)..n {
                if self.scale[(i, j)] != 0.0 {
                    return Err(GpError::arg("scale is not lower-triangular"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianLikelihood {
    pub noise_variance: f64,
}

impl GaussianLikelihood {
    pub fn new(noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(GpError::arg(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(GaussianLikelihood { noise_variance })
    }

    pub fn log_density(&self, y: f64, f: f64) -> f64 {
        let s2 = self.noise_variance;
        -0.5 * (2.0 * PI * s2).ln() - 0.5 * (y - f) * (y - f) / s2
    }
}

/// Whether each variational factor is parameterized against a standard
/// normal prior. Fixed when a model is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Whitening {
    pub u: bool,
    pub v: bool,
}

impl Whitening {
    pub const NONE: Whitening = Whitening { u: false, v: false };
    pub const BOTH: Whitening = Whitening { u: true, v: true };
}

/// KL[N(m, LLᵀ) ‖ N(0, L⁰L⁰ᵀ)] on the tape. `prior_scale = None` means the
/// standard normal prior.
pub(crate) fn kl_graph<'t>(
    mean: Var<'t>,
    scale: Var<'t>,
    prior_scale: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let tape = mean.tape();
    let dim = mean.shape().0 as f64;
    let (p, a, log_det_prior) = match prior_scale {
        Some(l0) => (l0.solve_lower(scale)?, l0.solve_lower(mean)?, Some(l0.log_diag_sum())),
        None => (scale, mean, None),
    };
    let quad = (p.sum_sq() + a.sum_sq() - tape.scalar(dim)) * 0.5;
    let kl = quad - scale.log_diag_sum();
    Ok(match log_det_prior {
        Some(ld) => kl + ld,
        None => kl,
    })
}

/// KL divergence from q to the zero-mean Gaussian with lower Cholesky
/// factor `prior_scale`.
pub fn kl_to_prior(q: &CholeskyGaussian, prior_scale: &DMatrix<f64>) -> Result<f64> {
    let n = q.dim();
    if prior_scale.shape() != (n, n) || q.scale.shape() != (n, n) {
        return Err(GpError::dim("kl_to_prior: dimensions disagree"));
    }
    if prior_scale.diagonal().iter().any(|d| !(d.abs() > 0.0)) {
        return Err(GpError::Numerical("singular prior scale".into()));
    }
    let tape = Tape::new();
    let m = tape.constant(DMatrix::from_column_slice(n, 1, q.mean.as_slice()));
    let l = tape.constant(q.scale.clone());
    let l0 = tape.constant(prior_scale.clone());
    Ok(kl_graph(m, l, Some(l0))?.scalar_value())
}

/// E_{f∼N(mu, var_q)} log N(y | f, σ²).
pub fn expected_log_lik_gaussian(y: f64, mu: f64, var_q: f64, lik: &GaussianLikelihood) -> f64 {
    lik.log_density(y, mu) - var_q / (2.0 * lik.noise_variance)
}

/// Σₙ E log N(yₙ | fₙ, σ²) for marginals N(muₙ, varₙ), on the tape.
/// `noise` is the 1×1 noise-variance node.
pub(crate) fn expected_log_lik_graph<'t>(
    y: &DVector<f64>,
    mu: Var<'t>,
    var: Var<'t>,
    noise: Var<'t>,
) -> Var<'t> {
    let tape = mu.tape();
    let n = y.len() as f64;
    let resid = tape.column(y.as_slice()) - mu;
    let spread = resid.sum_sq() + var.sum();
    let log_norm = noise.ln().scale(-0.5 * n) - tape.scalar(0.5 * n * (2.0 * PI).ln());
    log_norm - spread.div_scalar(noise).scale(0.5)
}

/// Gauss–Hermite nodes and weights for ∫ e^{−x²} g(x) dx, nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the orthonormal Hermite recurrence.
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// Gauss–Hermite estimate of E_{f∼N(mu, var_q)} log_density(y, f).
pub fn expected_log_lik_quadrature(
    y: f64,
    mu: f64,
    var_q: f64,
    log_density: impl Fn(f64, f64) -> f64,
    nodes: usize,
) -> Result<f64> {
    if nodes == 0 {
        return Err(GpError::arg("quadrature needs at least one node"));
    }
    if !(var_q >= 0.0) {
        return Err(GpError::arg(format!("negative variance {var_q}")));
    }
    let (x, w) = gauss_hermite(nodes);
    let spread = (2.0 * var_q).sqrt();
    let norm = PI.sqrt();
    Ok(x
        .iter()
        .zip(&w)
        .map(|(xi, wi)| wi / norm * log_density(y, mu + spread * xi))
        .sum())
}

/// Maps whitened parameters (m, L) to the unwhitened factor
/// N(L⁰m, L⁰LLᵀL⁰ᵀ), whose scale is the triangular product L⁰L.
pub fn whiten_map(q_white: &CholeskyGaussian, prior_scale: &DMatrix<f64>) -> Result<CholeskyGaussian> {
    let n = q_white.dim();
    if prior_scale.shape() != (n, n) {
        return Err(GpError::dim("whiten_map: dimensions disagree"));
    }
    let l0 = prior_scale.lower_triangle();
    let scale = (&l0 * &q_white.scale).lower_triangle();
    CholeskyGaussian::new(&l0 * &q_white.mean, scale)
}

/// Inverse of [`whiten_map`]: (L⁰⁻¹m, L⁰⁻¹L).
pub fn whiten_map_inverse(q: &CholeskyGaussian, prior_scale: &DMatrix<f64>) -> Result<CholeskyGaussian> {
    let n = q.dim();
    if prior_scale.shape() != (n, n) {
        return Err(GpError::dim("whiten_map_inverse: dimensions disagree"));
    }
    let mean = linalg::solve_lower(prior_scale, &DMatrix::from_column_slice(n, 1, q.mean.as_slice()))?;
    let scale = linalg::solve_lower(prior_scale, &q.scale)?.lower_triangle();
    CholeskyGaussian::new(DVector::from_column_slice(mean.as_slice()), scale)
}
