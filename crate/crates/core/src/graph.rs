//! The Cholesky-based bound pipeline on the tape, shared by SVGP, SOLVE-GP
//! and every deep layer. With no orthogonal inducing set all orthogonal
//! terms are skipped and the SVGP bound is recovered.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::tape::{Tape, Var};
use crate::variational::{expected_log_lik_graph, kl_graph, CholeskyGaussian};

/// Kernel hyperparameters as 1×1 nodes.
#[derive(Clone, Copy)]
pub(crate) struct KernelVars<'t> {
    pub family: KernelFamily,
    pub lengthscale: Var<'t>,
    pub variance: Var<'t>,
}

impl<'t> KernelVars<'t> {
    pub fn constants(tape: &'t Tape, spec: &KernelSpec) -> Self {
        KernelVars {
            family: spec.family,
            lengthscale: tape.scalar(spec.lengthscale),
            variance: tape.scalar(spec.signal_variance),
        }
    }

    pub fn matrix(&self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        a.tape()
            .kernel(self.family, self.lengthscale, self.variance, a, b)
    }
}

/// A variational factor on the tape. `scale = None` pins the covariance to
/// the prior's (L⁰ unwhitened, I whitened), as for the frozen orthogonal
/// factor.
#[derive(Clone, Copy)]
pub(crate) struct FactorVars<'t> {
    pub mean: Var<'t>,
    pub scale: Option<Var<'t>>,
    pub whitened: bool,
}

impl<'t> FactorVars<'t> {
    pub fn constants(tape: &'t Tape, q: &CholeskyGaussian, whitened: bool) -> Self {
        FactorVars {
            mean: tape.column(q.mean.as_slice()),
            scale: Some(tape.constant(q.scale.clone())),
            whitened,
        }
    }
}

pub(crate) struct OrthogonalVars<'t> {
    pub o: Var<'t>,
    /// L_u⁰ \ K_uv
    pub a: Var<'t>,
    pub c_vv: Var<'t>,
    pub l_v0: Var<'t>,
}

/// Batch-independent matrices: K_uu, its factor and the orthogonal part.
pub(crate) struct InducingVars<'t> {
    pub kernel: KernelVars<'t>,
    pub z: Var<'t>,
    pub k_uu: Var<'t>,
    pub l_u0: Var<'t>,
    pub orth: Option<OrthogonalVars<'t>>,
}

/// Per-batch matrices.
pub(crate) struct BatchVars<'t> {
    /// L_u⁰ \ K_uf
    pub b: Var<'t>,
    /// L_v⁰ \ C_vf
    pub d: Option<Var<'t>>,
    pub c_vf: Option<Var<'t>>,
    pub k_diag: Var<'t>,
}

pub(crate) fn inducing<'t>(
    kernel: KernelVars<'t>,
    z: Var<'t>,
    o: Option<Var<'t>>,
) -> Result<InducingVars<'t>> {
    let k_uu = kernel.matrix(z, z)?;
    let l_u0 = k_uu.cholesky()?;
    let orth = match o {
        Some(o) if o.shape().0 > 0 => {
            let k_vv = kernel.matrix(o, o)?;
            let k_uv = kernel.matrix(z, o)?;
            let a = l_u0.solve_lower(k_uv)?;
            let c_vv = k_vv - a.tr_matmul(a);
            let l_v0 = c_vv.cholesky()?;
            Some(OrthogonalVars { o, a, c_vv, l_v0 })
        }
        _ => None,
    };
    Ok(InducingVars {
        kernel,
        z,
        k_uu,
        l_u0,
        orth,
    })
}

pub(crate) fn batch<'t>(ind: &InducingVars<'t>, x: Var<'t>) -> Result<BatchVars<'t>> {
    let rows = x.shape().0;
    let k_uf = ind.kernel.matrix(ind.z, x)?;
    let b = ind.l_u0.solve_lower(k_uf)?;
    let (d, c_vf) = match &ind.orth {
        Some(orth) => {
            let k_vf = ind.kernel.matrix(orth.o, x)?;
            let c_vf = k_vf - orth.a.tr_matmul(b);
            (Some(orth.l_v0.solve_lower(c_vf)?), Some(c_vf))
        }
        None => (None, None),
    };
    let k_diag = x.tape().kernel_diag(ind.kernel.variance, rows);
    Ok(BatchVars {
        b,
        d,
        c_vf,
        k_diag,
    })
}

/// Mean and variance of q(f(xₙ)) for every row of the batch.
pub(crate) fn marginals<'t>(
    ind: &InducingVars<'t>,
    bat: &BatchVars<'t>,
    q_u: &FactorVars<'t>,
    q_v: Option<&FactorVars<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    // Whitened factors absorb L⁰, so E and F collapse onto B (G, H onto D).
    let e = if q_u.whitened {
        bat.b
    } else {
        ind.l_u0.solve_lower_t(bat.b)?
    };
    let mut mu = e.tr_matmul(q_u.mean);
    // With the prior covariance the F and B terms cancel exactly.
    let mut var = match q_u.scale {
        Some(l) => bat.k_diag + l.tr_matmul(e).col_sum_sq() - bat.b.col_sum_sq(),
        None => bat.k_diag,
    };
    if let (Some(orth), Some(d), Some(q_v)) = (&ind.orth, bat.d, q_v) {
        let g = if q_v.whitened {
            d
        } else {
            orth.l_v0.solve_lower_t(d)?
        };
        mu = mu + g.tr_matmul(q_v.mean);
        if let Some(l) = q_v.scale {
            var = var + l.tr_matmul(g).col_sum_sq() - d.col_sum_sq();
        }
    }
    Ok((mu, var))
}

fn kl_factor<'t>(q: &FactorVars<'t>, l0: Var<'t>) -> Result<Var<'t>> {
    let prior = (!q.whitened).then_some(l0);
    match q.scale {
        Some(l) => kl_graph(q.mean, l, prior),
        // Equal covariances: only the Mahalanobis term survives.
        None => {
            let a = match prior {
                Some(l0) => l0.solve_lower(q.mean)?,
                None => q.mean,
            };
            Ok(a.sum_sq().scale(0.5))
        }
    }
}

pub(crate) fn kl_u<'t>(ind: &InducingVars<'t>, q_u: &FactorVars<'t>) -> Result<Var<'t>> {
    kl_factor(q_u, ind.l_u0)
}

pub(crate) fn kl_v<'t>(ind: &InducingVars<'t>, q_v: &FactorVars<'t>) -> Result<Option<Var<'t>>> {
    match &ind.orth {
        Some(orth) => Ok(Some(kl_factor(q_v, orth.l_v0)?)),
        None => Ok(None),
    }
}

/// scale · Σ E log p(yₙ | fₙ) − KL_u − KL_v.
#[allow(clippy::too_many_arguments)]
pub(crate) fn uncollapsed_bound<'t>(
    kernel: KernelVars<'t>,
    noise: Var<'t>,
    z: Var<'t>,
    o: Option<Var<'t>>,
    q_u: &FactorVars<'t>,
    q_v: Option<&FactorVars<'t>>,
    x: Var<'t>,
    y: &DVector<f64>,
    scale: f64,
) -> Result<Var<'t>> {
    let ind = inducing(kernel, z, o)?;
    let mut bound = -kl_u(&ind, q_u)?;
    if let Some(q_v) = q_v {
        if let Some(klv) = kl_v(&ind, q_v)? {
            bound = bound - klv;
        }
    }
    if y.is_empty() {
        return Ok(bound);
    }
    let bat = batch(&ind, x)?;
    let (mu, var) = marginals(&ind, &bat, q_u, q_v)?;
    let data = expected_log_lik_graph(y, mu, var, noise);
    Ok(data.scale(scale) + bound)
}

/// Dense copy of a tape value as a column vector.
pub(crate) fn to_vector(v: Var<'_>) -> DVector<f64> {
    DVector::from_column_slice(v.value().as_slice())
}

pub(crate) fn to_matrix(v: Var<'_>) -> DMatrix<f64> {
    v.value().clone()
}

/// Joint predictive mean and covariance of the latent function at `x`.
pub(crate) fn predictive<'t>(
    ind: &InducingVars<'t>,
    x: Var<'t>,
    q_u: &FactorVars<'t>,
    q_v: Option<&FactorVars<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let bat = batch(ind, x)?;
    let k_ss = ind.kernel.matrix(x, x)?;
    let e = if q_u.whitened {
        bat.b
    } else {
        ind.l_u0.solve_lower_t(bat.b)?
    };
    let mut mu = e.tr_matmul(q_u.mean);
    let mut cov = match q_u.scale {
        Some(l) => {
            let f = l.tr_matmul(e);
            k_ss + f.tr_matmul(f) - bat.b.tr_matmul(bat.b)
        }
        None => k_ss,
    };
    if let (Some(orth), Some(d), Some(q_v)) = (&ind.orth, bat.d, q_v) {
        let g = if q_v.whitened {
            d
        } else {
            orth.l_v0.solve_lower_t(d)?
        };
        mu = mu + g.tr_matmul(q_v.mean);
        if let Some(l) = q_v.scale {
            let h = l.tr_matmul(g);
            cov = cov + h.tr_matmul(h) - d.tr_matmul(d);
        }
    }
    Ok((mu, cov))
}

/// Collapsed bound with q(u) optimized out:
/// log N(y | C_fv C_vv⁻¹ m_v, Q_ff + σ²I) − tr(S_f⊥)/(2σ²) − KL_v.
/// Without an orthogonal factor this is the classic collapsed bound.
/// Q_ff is applied through the Woodbury identity with Λ = I + BBᵀ/σ².
pub(crate) fn collapsed_bound<'t>(
    ind: &InducingVars<'t>,
    bat: &BatchVars<'t>,
    q_v: Option<&FactorVars<'t>>,
    noise: Var<'t>,
    y: &DVector<f64>,
) -> Result<Var<'t>> {
    let tape = noise.tape();
    let n = y.len() as f64;
    let m = bat.b.shape().0;
    let lam = bat.b.matmul(bat.b.t()).div_scalar(noise) + tape.constant(DMatrix::identity(m, m));
    let l_lam = lam.cholesky()?;
    let mut resid = tape.column(y.as_slice());
    let mut trace = bat.k_diag.sum() - bat.b.sum_sq();
    let mut kl = None;
    if let (Some(orth), Some(d), Some(q_v)) = (&ind.orth, bat.d, q_v) {
        let g = if q_v.whitened {
            d
        } else {
            orth.l_v0.solve_lower_t(d)?
        };
        resid = resid - g.tr_matmul(q_v.mean);
        if let Some(l) = q_v.scale {
            trace = trace + l.tr_matmul(g).sum_sq() - d.sum_sq();
        }
        kl = kl_v(ind, q_v)?;
    }
    let c = l_lam.solve_lower(bat.b.matmul(resid))?;
    let quad = resid.sum_sq().div_scalar(noise) - c.sum_sq().div_scalar(noise).div_scalar(noise);
    let log_det = noise.ln().scale(n) + l_lam.log_diag_sum().scale(2.0);
    let log_n = (quad + log_det).scale(-0.5) - tape.scalar(0.5 * n * (2.0 * std::f64::consts::PI).ln());
    let bound = log_n - trace.div_scalar(noise).scale(0.5);
    Ok(match kl {
        Some(kl) => bound - kl,
        None => bound,
    })
}
