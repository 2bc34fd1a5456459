//! SOLVE-GP: a standard inducing set Z plus orthogonal inducing points O
//! that live in the residual process after conditioning on f(Z).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::exact::GaussianDensity;
use crate::graph::{self, FactorVars, InducingVars, KernelVars};
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::linalg::{self, cholesky_jittered, solve_lower, solve_lower_transpose};
use crate::svgp::{check_batch, check_scale};
use crate::tape::{Tape, Var};
use crate::trainer::params::{ParamBlock, Trainable, Transform};
use crate::variational::{whiten_map, CholeskyGaussian, GaussianLikelihood, Whitening};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Free,
    /// The covariance of q(v) is pinned to the residual prior C_vv and only
    /// its mean is learned.
    OdvgpFrozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveGpState {
    pub kernel: KernelSpec,
    pub likelihood: GaussianLikelihood,
    pub z: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub q_u: CholeskyGaussian,
    pub q_v: CholeskyGaussian,
    pub mode: Mode,
    pub whitening: Whitening,
}

/// Kernel matrices and triangular solves shared by the bound and the
/// marginals. Built for one set of hyperparameters and one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GramCache {
    pub k_uu: DMatrix<f64>,
    pub l_u0: DMatrix<f64>,
    pub k_uv: DMatrix<f64>,
    /// L_u⁰ \ K_uv
    pub a: DMatrix<f64>,
    /// K_vv − AᵀA, before jitter.
    pub c_vv: DMatrix<f64>,
    pub l_v0: DMatrix<f64>,
    pub k_uf: DMatrix<f64>,
    /// L_u⁰ \ K_uf
    pub b: DMatrix<f64>,
    pub c_vf: DMatrix<f64>,
    /// L_v⁰ \ C_vf
    pub d: DMatrix<f64>,
    pub k_ff_diag: DVector<f64>,
    /// diag(K_ff) − colsq(B) − colsq(D): residual variance left after both
    /// inducing sets.
    pub residual_diag: DVector<f64>,
}

impl SolveGpState {
    /// State with both factors at their priors.
    pub fn new(
        kernel: KernelSpec,
        likelihood: GaussianLikelihood,
        z: DMatrix<f64>,
        o: DMatrix<f64>,
        mode: Mode,
        whitening: Whitening,
    ) -> Result<Self> {
        let (m, m2) = (z.nrows(), o.nrows());
        let mut state = SolveGpState {
            kernel,
            likelihood,
            z,
            o,
            q_u: CholeskyGaussian::standard(m),
            q_v: CholeskyGaussian::standard(m2),
            mode,
            whitening,
        };
        let (l_u0, l_v0) = state.prior_scales()?;
        if !whitening.u {
            state.q_u.scale = l_u0;
        }
        if !whitening.v {
            state.q_v.scale = l_v0;
        }
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.z.nrows() == 0 {
            return Err(GpError::arg("at least one inducing point is required"));
        }
        if self.o.nrows() > 0 && self.o.ncols() != self.z.ncols() {
            return Err(GpError::dim("Z and O have different input dimensions"));
        }
        if self.q_u.dim() != self.z.nrows() || self.q_v.dim() != self.o.nrows() {
            return Err(GpError::dim(format!(
                "factor dimensions ({}, {}) do not match inducing sets ({}, {})",
                self.q_u.dim(),
                self.q_v.dim(),
                self.z.nrows(),
                self.o.nrows()
            )));
        }
        self.q_u.validate()?;
        self.q_v.validate()
    }

    pub fn num_inducing(&self) -> (usize, usize) {
        (self.z.nrows(), self.o.nrows())
    }

    /// Jittered factors L_u⁰ of K_uu and L_v⁰ of C_vv.
    pub fn prior_scales(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (l_u0, l_v0, _) = prior_factors(&self.kernel, &self.z, &self.o)?;
        Ok((l_u0, l_v0))
    }

    /// Recomputes the pinned scale of q(v) after hyperparameters, Z or O
    /// changed. No-op in free mode.
    pub fn refresh_frozen(&mut self) -> Result<()> {
        if self.mode == Mode::OdvgpFrozen {
            let m2 = self.o.nrows();
            self.q_v.scale = if self.whitening.v {
                DMatrix::identity(m2, m2)
            } else {
                self.prior_scales()?.1
            };
        }
        Ok(())
    }

    /// The same model with both factors expressed against their priors
    /// directly (no whitening).
    pub fn unwhitened(&self) -> Result<SolveGpState> {
        let (l_u0, l_v0) = self.prior_scales()?;
        let mut out = self.clone();
        if self.whitening.u {
            out.q_u = whiten_map(&self.q_u, &l_u0)?;
        }
        if self.whitening.v && self.o.nrows() > 0 {
            out.q_v = whiten_map(&self.q_v, &l_v0)?;
        }
        out.whitening = Whitening::NONE;
        Ok(out)
    }

    fn q_v_vars<'t>(&self, mean: Var<'t>, scale: Option<Var<'t>>) -> FactorVars<'t> {
        FactorVars {
            mean,
            scale: match self.mode {
                Mode::Free => scale,
                Mode::OdvgpFrozen => None,
            },
            whitened: self.whitening.v,
        }
    }

    fn constant_graph<'t>(&self, tape: &'t Tape) -> Result<(InducingVars<'t>, FactorVars<'t>, FactorVars<'t>)> {
        self.validate()?;
        let ind = graph::inducing(
            KernelVars::constants(tape, &self.kernel),
            tape.constant(self.z.clone()),
            Some(tape.constant(self.o.clone())),
        )?;
        let q_u = FactorVars::constants(tape, &self.q_u, self.whitening.u);
        let q_v = self.q_v_vars(
            tape.column(self.q_v.mean.as_slice()),
            Some(tape.constant(self.q_v.scale.clone())),
        );
        Ok((ind, q_u, q_v))
    }
}

fn prior_factors(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    o: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let k_uu = kernel_matrix(kernel, z, z)?;
    let (l_u0, _) = cholesky_jittered(&k_uu)?;
    if o.nrows() == 0 {
        return Ok((l_u0, DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let a = solve_lower(&l_u0, &kernel_matrix(kernel, z, o)?)?;
    let c_vv = kernel_matrix(kernel, o, o)? - a.tr_mul(&a);
    let (l_v0, _) = cholesky_jittered(&c_vv)?;
    Ok((l_u0, l_v0, c_vv))
}

impl Trainable for SolveGpState {
    fn param_blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = vec![
            ParamBlock::scalar("lengthscale", self.kernel.lengthscale),
            ParamBlock::scalar("signal_variance", self.kernel.signal_variance),
            ParamBlock::scalar("noise_variance", self.likelihood.noise_variance),
            ParamBlock::new("z", Transform::Identity, self.z.clone()),
            ParamBlock::new("o", Transform::Identity, self.o.clone()),
            ParamBlock::column("m_u", &self.q_u.mean),
            ParamBlock::new("l_u", Transform::TrilSoftplus, self.q_u.scale.clone()),
            ParamBlock::column("m_v", &self.q_v.mean),
        ];
        if self.mode == Mode::Free {
            blocks.push(ParamBlock::new(
                "l_v",
                Transform::TrilSoftplus,
                self.q_v.scale.clone(),
            ));
        }
        blocks
    }

    fn set_param_blocks(&mut self, v: &[DMatrix<f64>]) -> Result<()> {
        let expected = if self.mode == Mode::Free { 9 } else { 8 };
        if v.len() != expected {
            return Err(GpError::dim(format!("solvegp expects {expected} parameter blocks")));
        }
        self.kernel.lengthscale = v[0][(0, 0)];
        self.kernel.signal_variance = v[1][(0, 0)];
        self.likelihood.noise_variance = v[2][(0, 0)];
        self.z = v[3].clone();
        self.o = v[4].clone();
        self.q_u = CholeskyGaussian {
            mean: DVector::from_column_slice(v[5].as_slice()),
            scale: v[6].lower_triangle(),
        };
        self.q_v.mean = DVector::from_column_slice(v[7].as_slice());
        match self.mode {
            Mode::Free => self.q_v.scale = v[8].lower_triangle(),
            Mode::OdvgpFrozen => self.refresh_frozen()?,
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
            mean: p[5],
            scale: Some(p[6]),
            whitened: self.whitening.u,
        };
        let q_v = self.q_v_vars(p[7], p.get(8).copied());
        let xv = tape.constant(x.clone());
        graph::uncollapsed_bound(kernel, p[2], p[3], Some(p[4]), &q_u, Some(&q_v), xv, y, scale)
    }

    fn predict_latent(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let tape = Tape::new();
        let (ind, q_u, q_v) = self.constant_graph(&tape)?;
        let bat = graph::batch(&ind, tape.constant(xstar.clone()))?;
        let (mu, var) = graph::marginals(&ind, &bat, &q_u, Some(&q_v))?;
        Ok((graph::to_vector(mu), graph::to_vector(var)))
    }

    fn noise_variance(&self) -> f64 {
        self.likelihood.noise_variance
    }

    fn input_dim(&self) -> usize {
        self.z.ncols()
    }
}

pub fn build_gram_cache(state: &SolveGpState, x: &DMatrix<f64>) -> Result<GramCache> {
    state.validate()?;
    if x.ncols() != state.z.ncols() {
        return Err(GpError::dim("batch inputs have the wrong dimension"));
    }
    let tape = Tape::new();
    let ind = graph::inducing(
        KernelVars::constants(&tape, &state.kernel),
        tape.constant(state.z.clone()),
        Some(tape.constant(state.o.clone())),
    )?;
    let bat = graph::batch(&ind, tape.constant(x.clone()))?;
    let (m, n) = (state.z.nrows(), x.nrows());
    let b = graph::to_matrix(bat.b);
    let k_ff_diag = graph::to_vector(bat.k_diag);
    let (k_uv, a, c_vv, l_v0, c_vf, d) = match (&ind.orth, bat.d, bat.c_vf) {
        (Some(orth), Some(d), Some(c_vf)) => (
            graph::to_matrix(ind.kernel.matrix(ind.z, orth.o)?),
            graph::to_matrix(orth.a),
            graph::to_matrix(orth.c_vv),
            graph::to_matrix(orth.l_v0),
            graph::to_matrix(c_vf),
            graph::to_matrix(d),
        ),
        _ => (
            DMatrix::zeros(m, 0),
            DMatrix::zeros(m, 0),
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, n),
            DMatrix::zeros(0, n),
        ),
    };
    let residual_diag = &k_ff_diag - linalg::col_sum_sq(&b) - linalg::col_sum_sq(&d);
    Ok(GramCache {
        k_uu: graph::to_matrix(ind.k_uu),
        l_u0: graph::to_matrix(ind.l_u0),
        k_uv,
        a,
        c_vv,
        l_v0,
        k_uf: graph::to_matrix(ind.kernel.matrix(ind.z, tape.constant(x.clone()))?),
        b,
        c_vf,
        d,
        k_ff_diag,
        residual_diag,
    })
}

/// Means and variances of q(f) at the batch the cache was built for.
/// Variances are clamped at 0.
pub fn marginal_q_f(state: &SolveGpState, cache: &GramCache) -> Result<(DVector<f64>, DVector<f64>)> {
    state.validate()?;
    let e = if state.whitening.u {
        cache.b.clone()
    } else {
        solve_lower_transpose(&cache.l_u0, &cache.b)?
    };
    let f = state.q_u.scale.tr_mul(&e);
    let mut mu = e.tr_mul(&state.q_u.mean);
    let mut var = &cache.k_ff_diag + linalg::col_sum_sq(&f) - linalg::col_sum_sq(&cache.b);
    if state.o.nrows() > 0 {
        let g = if state.whitening.v {
            cache.d.clone()
        } else {
            solve_lower_transpose(&cache.l_v0, &cache.d)?
        };
        mu += g.tr_mul(&state.q_v.mean);
        if state.mode == Mode::Free {
            let h = state.q_v.scale.tr_mul(&g);
            var += linalg::col_sum_sq(&h) - linalg::col_sum_sq(&cache.d);
        }
    }
    Ok((mu, var.map(|v| v.max(0.0))))
}

/// Uncollapsed SOLVE-GP bound on a batch with the data term scaled by
/// `scale`.
pub fn solvegp_bound(state: &SolveGpState, x: &DMatrix<f64>, y: &DVector<f64>, scale: f64) -> Result<f64> {
    state.validate()?;
    state.bound_value(x, y, scale, 0)
}

/// Joint predictive density of the latent function at `xstar`.
pub fn solvegp_predict(state: &SolveGpState, xstar: &DMatrix<f64>) -> Result<GaussianDensity> {
    if xstar.ncols() != state.z.ncols() {
        return Err(GpError::dim("test inputs have the wrong dimension"));
    }
    let tape = Tape::new();
    let (ind, q_u, q_v) = state.constant_graph(&tape)?;
    let (mu, cov) = graph::predictive(&ind, tape.constant(xstar.clone()), &q_u, Some(&q_v))?;
    Ok(GaussianDensity {
        mean: graph::to_vector(mu),
        covariance: graph::to_matrix(cov),
    })
}

/// Bound with q(u) replaced by its optimum for the given q(v) (full batch).
/// `q_v` is in unwhitened form. With `prior_covariance` the scale of `q_v`
/// is ignored and its covariance is taken to be C_vv, which removes the
/// orthogonal trace correction and reduces the KL to a Mahalanobis term.
#[allow(clippy::too_many_arguments)]
pub fn collapsed_solvegp_bound(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    o: &DMatrix<f64>,
    q_v: &CholeskyGaussian,
    prior_covariance: bool,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    likelihood: &GaussianLikelihood,
) -> Result<f64> {
    check_batch(x, y, z.ncols())?;
    if q_v.dim() != o.nrows() {
        return Err(GpError::dim("q(v) dimension does not match O"));
    }
    let tape = Tape::new();
    let ind = graph::inducing(
        KernelVars::constants(&tape, kernel),
        tape.constant(z.clone()),
        Some(tape.constant(o.clone())),
    )?;
    let bat = graph::batch(&ind, tape.constant(x.clone()))?;
    let q = FactorVars {
        mean: tape.column(q_v.mean.as_slice()),
        scale: (!prior_covariance).then(|| tape.constant(q_v.scale.clone())),
        whitened: false,
    };
    let noise = tape.scalar(likelihood.noise_variance);
    Ok(graph::collapsed_bound(&ind, &bat, Some(&q), noise, y)?.scalar_value())
}

fn woodbury_parts(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    o: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (l_u0, l_v0, _) = prior_factors(kernel, z, o)?;
    let b = solve_lower(&l_u0, &kernel_matrix(kernel, z, x)?)?;
    let a = solve_lower(&l_u0, &kernel_matrix(kernel, z, o)?)?;
    let c_vf = kernel_matrix(kernel, o, x)? - a.tr_mul(&b);
    let d = solve_lower(&l_v0, &c_vf)?;
    Ok((b, d, l_v0))
}

/// (Q_ff + σ²I)⁻¹ r via Λ = I + BBᵀ/σ².
fn apply_noisy_q_inverse(b: &DMatrix<f64>, s2: f64, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = b.nrows();
    let lam = DMatrix::identity(m, m) + b * b.transpose() / s2;
    let (l, _) = cholesky_jittered(&lam)?;
    let c = solve_lower_transpose(&l, &solve_lower(&l, &(b * r))?)?;
    Ok((r - b.tr_mul(&c) / s2) / s2)
}

/// The q(v) that maximizes the collapsed bound, in unwhitened form.
pub fn optimal_qv(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    o: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    likelihood: &GaussianLikelihood,
) -> Result<CholeskyGaussian> {
    check_batch(x, y, z.ncols())?;
    let m2 = o.nrows();
    if m2 == 0 {
        return Ok(CholeskyGaussian::standard(0));
    }
    let s2 = likelihood.noise_variance;
    let (b, d, l_v0) = woodbury_parts(kernel, z, o, x)?;
    // With C_vv = L Lᵀ and D = L⁻¹C_vf the optimum is
    //   m = L (I + D A⁻¹ Dᵀ)⁻¹ D A⁻¹ y,  S = L (I + DDᵀ/σ²)⁻¹ Lᵀ.
    let ycol = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let ainv_y = apply_noisy_q_inverse(&b, s2, &ycol)?;
    let ainv_dt = apply_noisy_q_inverse(&b, s2, &d.transpose())?;
    let p_mean = DMatrix::identity(m2, m2) + &d * ainv_dt;
    let (lp, _) = cholesky_jittered(&p_mean.symmetric_part())?;
    let w = solve_lower_transpose(&lp, &solve_lower(&lp, &(&d * ainv_y))?)?;
    let mean = &l_v0 * w;
    let p_cov = DMatrix::identity(m2, m2) + &d * d.transpose() / s2;
    let (lc, _) = cholesky_jittered(&p_cov)?;
    // S = (L Lc⁻ᵀ)(L Lc⁻ᵀ)ᵀ; refactor to get a lower-triangular scale.
    let half = solve_lower(&lc, &l_v0.transpose())?.transpose();
    let s = (&half * half.transpose()).symmetric_part();
    let (scale, _) = cholesky_jittered(&s)?;
    CholeskyGaussian::new(DVector::from_column_slice(mean.as_slice()), scale)
}

/// log N(y | 0, Q_ff + σ²I) − ½ tr[(Q_ff + σ²I)⁻¹(K_ff − Q_ff)], evaluated
/// as the classic collapsed bound plus a non-negative correction. Needs
/// the N×N residual K_ff − Q_ff, so memory is quadratic in N.
pub fn tighter_bound_appendix_a(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    likelihood: &GaussianLikelihood,
) -> Result<f64> {
    let titsias = crate::svgp::titsias_collapsed_bound(kernel, z, x, y, likelihood)?;
    Ok(titsias + appendix_a_correction(kernel, z, x, likelihood)?)
}

/// ½σ⁻⁴ tr[K_fu(K_uu + σ⁻²K_uf K_fu)⁻¹K_uf (K_ff − Q_ff)] ≥ 0.
pub fn appendix_a_correction(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    likelihood: &GaussianLikelihood,
) -> Result<f64> {
    let s2 = likelihood.noise_variance;
    let (l_u0, _) = cholesky_jittered(&kernel_matrix(kernel, z, z)?)?;
    let b = solve_lower(&l_u0, &kernel_matrix(kernel, z, x)?)?;
    let resid = kernel_matrix(kernel, x, x)? - b.tr_mul(&b);
    let m = b.nrows();
    let lam = DMatrix::identity(m, m) + &b * b.transpose() / s2;
    let (l, _) = cholesky_jittered(&lam)?;
    let r = solve_lower(&l, &b)?;
    Ok(0.5 * (&r * resid * r.transpose()).trace() / (s2 * s2))
}

/// The same quantity as [`tighter_bound_appendix_a`] computed directly
/// from an N×N factorization of Q_ff + σ²I.
pub fn tighter_bound_appendix_a_dense(
    kernel: &KernelSpec,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    likelihood: &GaussianLikelihood,
) -> Result<f64> {
    check_batch(x, y, z.ncols())?;
    let n = y.len();
    let s2 = likelihood.noise_variance;
    let (l_u0, _) = cholesky_jittered(&kernel_matrix(kernel, z, z)?)?;
    let b = solve_lower(&l_u0, &kernel_matrix(kernel, z, x)?)?;
    let q = b.tr_mul(&b);
    let resid = kernel_matrix(kernel, x, x)? - &q;
    let (l, _) = cholesky_jittered(&(q + DMatrix::identity(n, n) * s2))?;
    let alpha = solve_lower(&l, &DMatrix::from_column_slice(n, 1, y.as_slice()))?;
    let log_n = -0.5 * alpha.norm_squared()
        - linalg::log_diag_sum(&l)
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let w = solve_lower(&l, &resid)?;
    let v = solve_lower(&l, &w.transpose())?;
    Ok(log_n - 0.5 * v.trace())
}

/// K_uu⁻¹ K_uv through the jittered factor.
fn projection(state: &SolveGpState, l_u0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k_uv = kernel_matrix(&state.kernel, &state.z, &state.o)?;
    solve_lower_transpose(l_u0, &solve_lower(l_u0, &k_uv)?)
}

/// q(u, v) over Z∪O implied by the state: v = v⊥ + K_vu K_uu⁻¹ u.
/// `s_v` overrides the covariance of q(v⊥).
pub fn structured_joint(state: &SolveGpState, s_v: Option<&DMatrix<f64>>) -> Result<GaussianDensity> {
    let st = state.unwhitened()?;
    let (l_u0, _) = st.prior_scales()?;
    let p = projection(&st, &l_u0)?;
    let s_u = st.q_u.covariance();
    let s_v = match s_v {
        Some(s) => s.clone(),
        None => st.q_v.covariance(),
    };
    let (m, m2) = st.num_inducing();
    let mut mean = DVector::zeros(m + m2);
    mean.rows_mut(0, m).copy_from(&st.q_u.mean);
    mean.rows_mut(m, m2)
        .copy_from(&(&st.q_v.mean + p.tr_mul(&st.q_u.mean)));
    let cross = &s_u * &p;
    let mut cov = DMatrix::zeros(m + m2, m + m2);
    cov.view_mut((0, 0), (m, m)).copy_from(&s_u);
    cov.view_mut((0, m), (m, m2)).copy_from(&cross);
    cov.view_mut((m, 0), (m2, m)).copy_from(&cross.transpose());
    cov.view_mut((m, m), (m2, m2))
        .copy_from(&(s_v + p.tr_mul(&cross)));
    Ok(GaussianDensity {
        mean,
        covariance: cov,
    })
}

/// Lower Cholesky factor of the structured joint, obtained without a
/// factorization: [[L_u, 0], [K_vu K_uu⁻¹ L_u, L_v]].
pub fn structured_joint_factor(state: &SolveGpState) -> Result<CholeskyGaussian> {
    let st = state.unwhitened()?;
    let (l_u0, _) = st.prior_scales()?;
    let p = projection(&st, &l_u0)?;
    let joint = structured_joint(&st, None)?;
    let (m, m2) = st.num_inducing();
    let mut scale = DMatrix::zeros(m + m2, m + m2);
    scale.view_mut((0, 0), (m, m)).copy_from(&st.q_u.scale);
    scale.view_mut((m, 0), (m2, m)).copy_from(&p.tr_mul(&st.q_u.scale));
    scale.view_mut((m, m), (m2, m2)).copy_from(&st.q_v.scale);
    CholeskyGaussian::new(joint.mean, scale)
}

/// The joint q(u, v) of the orthogonally decoupled model, written with
/// K_vv and S_u − K_uu. Only defined for states with the frozen q(v)
/// covariance.
pub fn odvgp_joint(state: &SolveGpState) -> Result<GaussianDensity> {
    if state.mode != Mode::OdvgpFrozen {
        return Err(GpError::arg("odvgp_joint requires a state in odvgp_frozen mode"));
    }
    let st = state.unwhitened()?;
    let (l_u0, _) = st.prior_scales()?;
    let p = projection(&st, &l_u0)?;
    let k_uu = &l_u0 * l_u0.transpose();
    let k_vv = kernel_matrix(&st.kernel, &st.o, &st.o)?;
    let s_u = st.q_u.covariance();
    let (m, m2) = st.num_inducing();
    let mut mean = DVector::zeros(m + m2);
    mean.rows_mut(0, m).copy_from(&st.q_u.mean);
    mean.rows_mut(m, m2)
        .copy_from(&(&st.q_v.mean + p.tr_mul(&st.q_u.mean)));
    let cross = &s_u * &p;
    let mut cov = DMatrix::zeros(m + m2, m + m2);
    cov.view_mut((0, 0), (m, m)).copy_from(&s_u);
    cov.view_mut((0, m), (m, m2)).copy_from(&cross);
    cov.view_mut((m, 0), (m2, m)).copy_from(&cross.transpose());
    cov.view_mut((m, m), (m2, m2))
        .copy_from(&(k_vv + p.tr_mul(&((s_u - k_uu) * &p))));
    Ok(GaussianDensity {
        mean,
        covariance: cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::dense_log_marginal;
    use crate::linalg::{with_jitter_start, OpCounter};
    use crate::svgp::{svgp_bound, svgp_predict, titsias_collapsed_bound, SvgpState};
    use crate::variational::kl_to_prior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn random_lower(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => rng.random_range(-0.3..0.3),
            std::cmp::Ordering::Equal => rng.random_range(0.2..0.9),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    fn random_state(seed: u64, whitening: Whitening) -> (SolveGpState, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = pts(&[-1.2, 0.1, 1.3]);
        let o = pts(&[-0.5, 0.8]);
        let x = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let mut s = SolveGpState::new(
            KernelSpec::squared_exponential(rng.random_range(0.6..1.2), rng.random_range(0.5..1.5)),
            GaussianLikelihood::new(rng.random_range(0.05..0.3)).unwrap(),
            z,
            o,
            Mode::Free,
            whitening,
        )
        .unwrap();
        s.q_u = CholeskyGaussian {
            mean: DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
            scale: random_lower(&mut rng, 3),
        };
        s.q_v = CholeskyGaussian {
            mean: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
            scale: random_lower(&mut rng, 2) * 0.5,
        };
        (s, x, y)
    }

    struct Dense {
        kuu_inv: DMatrix<f64>,
        cvv: DMatrix<f64>,
        cvv_inv: DMatrix<f64>,
        kfu: DMatrix<f64>,
        cfv: DMatrix<f64>,
        kff: DMatrix<f64>,
    }

    fn dense(s: &SolveGpState, x: &DMatrix<f64>) -> Dense {
        let k = |a: &DMatrix<f64>, b: &DMatrix<f64>| kernel_matrix(&s.kernel, a, b).unwrap();
        let kuu_inv = k(&s.z, &s.z).try_inverse().unwrap();
        let kvu = k(&s.o, &s.z);
        let cvv = k(&s.o, &s.o) - &kvu * &kuu_inv * kvu.transpose();
        let kfu = k(x, &s.z);
        let cfv = k(x, &s.o) - &kfu * &kuu_inv * kvu.transpose();
        Dense {
            cvv_inv: cvv.clone().try_inverse().unwrap(),
            cvv,
            kuu_inv,
            kfu,
            cfv,
            kff: k(x, x),
        }
    }

    fn dense_kl(m: &DVector<f64>, s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
        let inv = k.clone().try_inverse().unwrap();
        0.5 * ((&inv * s).trace() + (m.transpose() * &inv * m)[(0, 0)] - m.len() as f64
            + k.determinant().ln()
            - s.determinant().ln())
    }

    /// Marginals and bound with explicit inverses.
    fn dense_bound(s: &SolveGpState, x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, f64) {
        let d = dense(s, x);
        let su = s.q_u.covariance();
        let sv = s.q_v.covariance();
        let mu = &d.kfu * &d.kuu_inv * &s.q_u.mean + &d.cfv * &d.cvv_inv * &s.q_v.mean;
        let cov = &d.kff - &d.kfu * &d.kuu_inv * d.kfu.transpose()
            + &d.kfu * &d.kuu_inv * &su * &d.kuu_inv * d.kfu.transpose()
            - &d.cfv * &d.cvv_inv * d.cfv.transpose()
            + &d.cfv * &d.cvv_inv * &sv * &d.cvv_inv * d.cfv.transpose();
        let s2 = s.likelihood.noise_variance;
        let mut b = 0.0;
        for n in 0..y.len() {
            b += -0.5 * (2.0 * std::f64::consts::PI * s2).ln()
                - 0.5 * ((y[n] - mu[n]).powi(2) + cov[(n, n)]) / s2;
        }
        let kuu = d.kuu_inv.clone().try_inverse().unwrap();
        b -= dense_kl(&s.q_u.mean, &su, &kuu) + dense_kl(&s.q_v.mean, &sv, &d.cvv);
        (mu, cov, b)
    }

    #[test]
    fn cache_matches_dense_residual_covariance() {
        let (s, x, _) = random_state(1, Whitening::NONE);
        let (c, ops) = OpCounter::scope(|| build_gram_cache(&s, &x).unwrap());
        assert_eq!(ops.cholesky, vec![3, 2]);
        let d = dense(&s, &x);
        assert!((&c.c_vv - &d.cvv).amax() < 1e-9);
        assert!((&c.c_vf - d.cfv.transpose()).amax() < 1e-9);
        assert!(c.residual_diag.iter().all(|v| *v > -1e-10));
    }

    #[test]
    fn far_orthogonal_points_decorrelate() {
        let (mut s, x, _) = random_state(2, Whitening::NONE);
        s.o = pts(&[80.0, 95.0]);
        let c = build_gram_cache(&s, &x).unwrap();
        let k_vv = kernel_matrix(&s.kernel, &s.o, &s.o).unwrap();
        assert!((c.c_vv - k_vv).amax() < 1e-6);
    }

    #[test]
    fn orthogonal_points_on_z_are_degenerate() {
        let (mut s, x, _) = random_state(3, Whitening::NONE);
        s.o = s.z.rows(0, 2).into_owned();
        s.q_v = CholeskyGaussian::standard(2);
        let (res, ops) = OpCounter::scope(|| build_gram_cache(&s, &x));
        match res {
            Ok(c) => {
                assert!(c.c_vv.amax() < 1e-8);
                assert_eq!(ops.cholesky, vec![3, 2]);
            }
            Err(e) => assert!(matches!(e, GpError::Factorization { size: 2, .. }), "{e}"),
        }
    }

    #[test]
    fn prior_factors_give_prior_marginals() {
        let (mut s, x, _) = random_state(4, Whitening::NONE);
        let (l_u0, l_v0) = s.prior_scales().unwrap();
        s.q_u = CholeskyGaussian::new(DVector::zeros(3), l_u0).unwrap();
        s.q_v = CholeskyGaussian::new(DVector::zeros(2), l_v0).unwrap();
        let c = build_gram_cache(&s, &x).unwrap();
        let (mu, var) = marginal_q_f(&s, &c).unwrap();
        assert!(mu.amax() < 1e-12);
        assert!((var - c.k_ff_diag).amax() < 1e-9);
    }

    #[test]
    fn marginals_and_bound_match_dense_oracle() {
        // Tiny jitter so the explicit-inverse oracle is comparable at 1e-8.
        with_jitter_start(1e-15, || for seed in 0..5 {
            let (s, x, y) = random_state(seed, Whitening::NONE);
            let (mu, cov, b) = dense_bound(&s, &x, &y);
            let c = build_gram_cache(&s, &x).unwrap();
            let (m, v) = marginal_q_f(&s, &c).unwrap();
            assert!((m - mu).amax() < 1e-8);
            assert!((v - cov.diagonal()).amax() < 1e-8);
            let got = solvegp_bound(&s, &x, &y, 1.0).unwrap();
            assert!((got - b).abs() < 1e-8, "{got} vs {b}");
        });
    }

    #[test]
    fn empty_data_leaves_both_kls() {
        let (s, _, _) = random_state(5, Whitening::NONE);
        let (l_u0, l_v0) = s.prior_scales().unwrap();
        let kl = kl_to_prior(&s.q_u, &l_u0).unwrap() + kl_to_prior(&s.q_v, &l_v0).unwrap();
        let b = solvegp_bound(&s, &DMatrix::zeros(0, 1), &DVector::zeros(0), 1.0).unwrap();
        assert!((b + kl).abs() < 1e-12);
    }

    #[test]
    fn prior_q_v_reduces_to_svgp() {
        for seed in 0..5 {
            let (mut s, x, y) = random_state(seed, Whitening::NONE);
            s.q_v = CholeskyGaussian::new(DVector::zeros(2), s.prior_scales().unwrap().1).unwrap();
            let sv = SvgpState {
                kernel: s.kernel,
                likelihood: s.likelihood,
                z: s.z.clone(),
                q_u: s.q_u.clone(),
                whitened: false,
            };
            let a = solvegp_bound(&s, &x, &y, 2.0).unwrap();
            let b = svgp_bound(&sv, &x, &y, 2.0).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_o_is_svgp() {
        let (mut s, x, y) = random_state(6, Whitening::NONE);
        s.o = DMatrix::zeros(0, 1);
        s.q_v = CholeskyGaussian::standard(0);
        let sv = SvgpState {
            kernel: s.kernel,
            likelihood: s.likelihood,
            z: s.z.clone(),
            q_u: s.q_u.clone(),
            whitened: false,
        };
        let (b, ops) = OpCounter::scope(|| solvegp_bound(&s, &x, &y, 1.0).unwrap());
        assert_eq!(b, svgp_bound(&sv, &x, &y, 1.0).unwrap());
        assert_eq!(ops.cholesky, vec![3]);
        let p = solvegp_predict(&s, &x).unwrap();
        assert!((p.mean - svgp_predict(&sv, &x).unwrap().mean).amax() < 1e-12);
    }

    #[test]
    fn prediction_matches_dense_and_marginals() {
        let (s, x, y) = random_state(7, Whitening::NONE);
        let xs = pts(&[-0.7, 1.9]);
        let (mu, cov, _) = dense_bound(&s, &xs, &DVector::zeros(2));
        let p = solvegp_predict(&s, &xs).unwrap();
        assert!((&p.mean - mu).amax() < 1e-8);
        assert!((&p.covariance - cov).amax() < 1e-8);
        let c = build_gram_cache(&s, &x).unwrap();
        let (m, v) = marginal_q_f(&s, &c).unwrap();
        let p = solvegp_predict(&s, &x).unwrap();
        assert!((m - p.mean).amax() < 1e-12);
        assert!((v - p.covariance.diagonal()).amax() < 1e-12);
        let _ = y;
    }

    #[test]
    fn prior_state_predicts_prior() {
        let (s, _, _) = random_state(8, Whitening::BOTH);
        let s = SolveGpState::new(s.kernel, s.likelihood, s.z, s.o, Mode::Free, Whitening::BOTH).unwrap();
        let xs = pts(&[-0.7, 0.4, 1.9]);
        let p = solvegp_predict(&s, &xs).unwrap();
        assert!(p.mean.amax() < 1e-12);
        assert!((p.covariance - kernel_matrix(&s.kernel, &xs, &xs).unwrap()).amax() < 1e-9);
    }

    #[test]
    fn whitened_and_mapped_states_agree() {
        for seed in 0..5 {
            let (s, x, y) = random_state(seed, Whitening::BOTH);
            let u = s.unwhitened().unwrap();
            let a = solvegp_bound(&s, &x, &y, 1.0).unwrap();
            let b = solvegp_bound(&u, &x, &y, 1.0).unwrap();
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn collapsed_reduces_to_titsias_at_prior() {
        let (s, x, y) = random_state(9, Whitening::NONE);
        let (_, l_v0) = s.prior_scales().unwrap();
        let prior = CholeskyGaussian::new(DVector::zeros(2), l_v0).unwrap();
        let t = titsias_collapsed_bound(&s.kernel, &s.z, &x, &y, &s.likelihood).unwrap();
        let c = collapsed_solvegp_bound(&s.kernel, &s.z, &s.o, &prior, false, &x, &y, &s.likelihood).unwrap();
        assert!((t - c).abs() < 1e-10);
    }

    #[test]
    fn frozen_covariance_path_matches_general_path() {
        let (s, x, y) = random_state(10, Whitening::NONE);
        let (_, l_v0) = s.prior_scales().unwrap();
        let q = CholeskyGaussian::new(s.q_v.mean.clone(), l_v0).unwrap();
        let general = collapsed_solvegp_bound(&s.kernel, &s.z, &s.o, &q, false, &x, &y, &s.likelihood).unwrap();
        let frozen = collapsed_solvegp_bound(&s.kernel, &s.z, &s.o, &q, true, &x, &y, &s.likelihood).unwrap();
        assert!((general - frozen).abs() < 1e-10);
        // log N(y | C_fv C_vv⁻¹ m_v, Q_ff + σ²I) − tr(K_ff − Q_ff)/2σ² − ½ m_vᵀ C_vv⁻¹ m_v
        let d = dense(&s, &x);
        let s2 = s.likelihood.noise_variance;
        let q_ff = &d.kfu * &d.kuu_inv * d.kfu.transpose();
        let cov = &q_ff + DMatrix::identity(6, 6) * s2;
        let r = &y - &d.cfv * &d.cvv_inv * &q.mean;
        let expect = -0.5 * (r.transpose() * cov.clone().try_inverse().unwrap() * &r)[(0, 0)]
            - 0.5 * cov.determinant().ln()
            - 3.0 * (2.0 * std::f64::consts::PI).ln()
            - (&d.kff - &q_ff).trace() / (2.0 * s2)
            - 0.5 * (q.mean.transpose() * &d.cvv_inv * &q.mean)[(0, 0)];
        assert!((frozen - expect).abs() < 1e-7, "{frozen} vs {expect}");
    }

    #[test]
    fn collapsed_dominates_uncollapsed() {
        let (s, x, y) = random_state(11, Whitening::NONE);
        let c = collapsed_solvegp_bound(&s.kernel, &s.z, &s.o, &s.q_v, false, &x, &y, &s.likelihood).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let mut t = s.clone();
            t.q_u = CholeskyGaussian {
                mean: DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5)),
                scale: random_lower(&mut rng, 3),
            };
            assert!(solvegp_bound(&t, &x, &y, 1.0).unwrap() <= c + 1e-8);
        }
    }

    fn eq8(s: &SolveGpState, x: &DMatrix<f64>, y: &DVector<f64>, raw: &[f64]) -> f64 {
        let q = CholeskyGaussian {
            mean: DVector::from_column_slice(&raw[..2]),
            scale: DMatrix::from_row_slice(2, 2, &[raw[2], 0.0, raw[3], raw[4]]),
        };
        collapsed_solvegp_bound(&s.kernel, &s.z, &s.o, &q, false, x, y, &s.likelihood).unwrap()
    }

    fn raw_of(q: &CholeskyGaussian) -> Vec<f64> {
        vec![q.mean[0], q.mean[1], q.scale[(0, 0)], q.scale[(1, 0)], q.scale[(1, 1)]]
    }

    #[test]
    fn optimal_qv_is_stationary() {
        let (s, x, y) = random_state(12, Whitening::NONE);
        let q = optimal_qv(&s.kernel, &s.z, &s.o, &x, &y, &s.likelihood).unwrap();
        let p = raw_of(&q);
        for i in 0..p.len() {
            let h = 1e-5;
            let (mut up, mut dn) = (p.clone(), p.clone());
            up[i] += h;
            dn[i] -= h;
            let g = (eq8(&s, &x, &y, &up) - eq8(&s, &x, &y, &dn)) / (2.0 * h);
            assert!(g.abs() < 1e-5, "coordinate {i}: {g}");
        }
    }

    #[test]
    fn optimal_qv_matches_gradient_ascent() {
        let (s, x, y) = random_state(13, Whitening::NONE);
        let q = optimal_qv(&s.kernel, &s.z, &s.o, &x, &y, &s.likelihood).unwrap();
        let mut p = vec![0.0, 0.0, 0.5, 0.0, 0.5];
        let mut adam = crate::trainer::Adam::new(5, 0.01, 0.9, 0.999, 1e-8);
        for t in 1..=5000 {
            let g: Vec<f64> = (0..5)
                .map(|i| {
                    let h = 1e-6;
                    let (mut up, mut dn) = (p.clone(), p.clone());
                    up[i] += h;
                    dn[i] -= h;
                    (eq8(&s, &x, &y, &up) - eq8(&s, &x, &y, &dn)) / (2.0 * h)
                })
                .collect();
            adam.step(&mut p, &g, t);
            // Keep the diagonal positive.
            p[2] = p[2].abs();
            p[4] = p[4].abs();
        }
        let best = eq8(&s, &x, &y, &raw_of(&q));
        assert!(best >= eq8(&s, &x, &y, &p) - 1e-10);
        let cov = |r: &[f64]| {
            let l = DMatrix::from_row_slice(2, 2, &[r[0], 0.0, r[1], r[2]]);
            &l * l.transpose()
        };
        assert!((DVector::from_column_slice(&p[..2]) - &q.mean).amax() < 1e-4);
        assert!((cov(&p[2..]) - q.covariance()).amax() < 1e-4);
    }

    #[test]
    fn huge_noise_makes_prior_optimal() {
        let (s, x, y) = random_state(14, Whitening::NONE);
        let lik = GaussianLikelihood::new(1e8).unwrap();
        let q = optimal_qv(&s.kernel, &s.z, &s.o, &x, &y, &lik).unwrap();
        let c = build_gram_cache(&s, &x).unwrap();
        assert!(q.mean.amax() < 1e-4);
        assert!((q.covariance() - &c.c_vv).amax() < 1e-4 * c.c_vv.amax());
    }

    #[test]
    fn appendix_a_forms_agree_and_order() {
        let kernel = KernelSpec::squared_exponential(0.8, 1.2);
        let lik = GaussianLikelihood::new(0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = DMatrix::from_fn(10, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let z = pts(&[-1.0, 0.0, 1.2]);
        let (a, b) = with_jitter_start(1e-15, || {
            (
                tighter_bound_appendix_a(&kernel, &z, &x, &y, &lik).unwrap(),
                tighter_bound_appendix_a_dense(&kernel, &z, &x, &y, &lik).unwrap(),
            )
        });
        // Oracle with explicit inverses.
        let kfu = kernel_matrix(&kernel, &x, &z).unwrap();
        let q = &kfu * kernel_matrix(&kernel, &z, &z).unwrap().try_inverse().unwrap() * kfu.transpose();
        let cov = &q + DMatrix::identity(10, 10) * 0.1;
        let inv = cov.clone().try_inverse().unwrap();
        let oracle = -0.5 * (y.transpose() * &inv * &y)[(0, 0)]
            - 0.5 * cov.determinant().ln()
            - 5.0 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * (&inv * (kernel_matrix(&kernel, &x, &x).unwrap() - &q)).trace();
        assert!((a - b).abs() < 1e-8 && (a - oracle).abs() < 1e-8, "{a} {b} {oracle}");
        assert!(appendix_a_correction(&kernel, &z, &x, &lik).unwrap() >= 0.0);
        let t = titsias_collapsed_bound(&kernel, &z, &x, &y, &lik).unwrap();
        let d = dense_log_marginal(&kernel, &x, &y, 0.1).unwrap();
        assert!(t <= a + 1e-8 && a <= d + 1e-8);
    }

    #[test]
    fn appendix_a_exact_when_z_is_x() {
        let kernel = KernelSpec::matern32(0.9, 1.0);
        let lik = GaussianLikelihood::new(0.2).unwrap();
        let x = pts(&[-1.0, -0.3, 0.4, 1.5]);
        let y = DVector::from_vec(vec![0.3, -0.4, 0.8, 0.1]);
        let a = tighter_bound_appendix_a(&kernel, &x, &x, &y, &lik).unwrap();
        let d = dense_log_marginal(&kernel, &x, &y, 0.2).unwrap();
        assert!((a - d).abs() < 1e-8);
    }

    #[test]
    fn structured_joint_of_priors_is_joint_prior() {
        let (s, _, _) = random_state(16, Whitening::NONE);
        let s = SolveGpState::new(s.kernel, s.likelihood, s.z, s.o, Mode::Free, Whitening::NONE).unwrap();
        let j = structured_joint(&s, None).unwrap();
        let zo = DMatrix::from_fn(5, 1, |i, _| if i < 3 { s.z[i] } else { s.o[i - 3] });
        let k = kernel_matrix(&s.kernel, &zo, &zo).unwrap();
        assert!(j.mean.amax() < 1e-12);
        assert!((j.covariance - k).amax() < 1e-8);
    }

    #[test]
    fn structured_joint_kl_and_prediction() {
        let (s, _, _) = random_state(17, Whitening::BOTH);
        let j = structured_joint(&s, None).unwrap();
        let f = structured_joint_factor(&s).unwrap();
        assert!((f.covariance() - &j.covariance).amax() < 1e-12);
        let zo = DMatrix::from_fn(5, 1, |i, _| if i < 3 { s.z[i] } else { s.o[i - 3] });
        let k = kernel_matrix(&s.kernel, &zo, &zo).unwrap();
        let u = s.unwhitened().unwrap();
        let (l_u0, l_v0) = u.prior_scales().unwrap();
        let kl_sum = kl_to_prior(&u.q_u, &l_u0).unwrap() + kl_to_prior(&u.q_v, &l_v0).unwrap();
        assert!((dense_kl(&j.mean, &j.covariance, &k) - kl_sum).abs() < 1e-8);
        let joint = SvgpState {
            kernel: s.kernel,
            likelihood: s.likelihood,
            z: zo,
            q_u: f,
            whitened: false,
        };
        let xs = pts(&[-1.7, -0.2, 0.5, 1.1, 2.4]);
        let a = svgp_predict(&joint, &xs).unwrap();
        let b = solvegp_predict(&s, &xs).unwrap();
        assert!((a.mean - b.mean).amax() < 1e-8);
        assert!((a.covariance - b.covariance).amax() < 1e-8);
    }

    #[test]
    fn odvgp_joint_is_structured_with_residual_covariance() {
        let (mut s, x, _) = random_state(18, Whitening::NONE);
        assert!(odvgp_joint(&s).is_err());
        s.mode = Mode::OdvgpFrozen;
        s.refresh_frozen().unwrap();
        let c = build_gram_cache(&s, &x).unwrap();
        let a = odvgp_joint(&s).unwrap();
        let b = structured_joint(&s, Some(&c.c_vv)).unwrap();
        assert!((&a.mean - b.mean).amax() < 1e-10);
        assert!((&a.covariance - b.covariance).amax() < 1e-10);
        // S_u = K_uu, zero means: the joint prior.
        s.q_u = CholeskyGaussian::new(DVector::zeros(3), c.l_u0.clone()).unwrap();
        s.q_v.mean = DVector::zeros(2);
        let zo = DMatrix::from_fn(5, 1, |i, _| if i < 3 { s.z[i] } else { s.o[i - 3] });
        let k = kernel_matrix(&s.kernel, &zo, &zo).unwrap();
        assert!((odvgp_joint(&s).unwrap().covariance - k).amax() < 1e-8);
    }

    #[test]
    fn frozen_mode_tracks_hyperparameters() {
        let (mut s, x, y) = random_state(19, Whitening::NONE);
        s.mode = Mode::OdvgpFrozen;
        s.refresh_frozen().unwrap();
        let blocks = s.param_blocks();
        assert_eq!(blocks.len(), 8);
        let mut values: Vec<_> = blocks.into_iter().map(|b| b.value).collect();
        values[0][(0, 0)] *= 1.3;
        s.set_param_blocks(&values).unwrap();
        assert_eq!(s.q_v.scale, s.prior_scales().unwrap().1);
        // The pinned path equals the free path with the scale set to L_v⁰.
        let mut free = s.clone();
        free.mode = Mode::Free;
        let a = solvegp_bound(&s, &x, &y, 1.0).unwrap();
        let b = solvegp_bound(&free, &x, &y, 1.0).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gradients_pass_audit() {
        for whitening in [Whitening::NONE, Whitening::BOTH] {
            let (s, x, y) = random_state(20, whitening);
            let r = crate::trainer::audit_model(&s, &x, &y, 1.0, 0, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{whitening:?}: {r:?}");
        }
        let (mut s, x, y) = random_state(21, Whitening::NONE);
        s.mode = Mode::OdvgpFrozen;
        s.refresh_frozen().unwrap();
        let r = crate::trainer::audit_model(&s, &x, &y, 1.0, 0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
