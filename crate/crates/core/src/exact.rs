//! Dense exact GP regression. Cubic in the number of points and intended
//! only as a reference for the sparse bounds (N up to a few thousand).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};
use crate::kernels::{kernel_matrix, KernelSpec};
use crate::linalg::{cholesky_jittered, log_diag_sum, solve_lower};

/// Multivariate normal given by mean and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianDensity {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal variances.
    pub fn variances(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }

    /// Lower Cholesky factor of the covariance under the jitter policy.
    pub fn scale(&self) -> Result<DMatrix<f64>> {
        Ok(cholesky_jittered(&self.covariance)?.0)
    }
}

fn check(x: &DMatrix<f64>, y: &DVector<f64>, noise_variance: f64) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(GpError::dim(format!(
            "{} inputs but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if !(noise_variance > 0.0) {
        return Err(GpError::arg("noise variance must be positive"));
    }
    Ok(())
}

fn noisy_factor(spec: &KernelSpec, x: &DMatrix<f64>, noise_variance: f64) -> Result<DMatrix<f64>> {
    let mut k = kernel_matrix(spec, x, x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_variance;
    }
    Ok(cholesky_jittered(&k)?.0)
}

/// log N(y | 0, K_ff + σ²I).
pub fn dense_log_marginal(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
) -> Result<f64> {
    check(x, y, noise_variance)?;
    let l = noisy_factor(spec, x, noise_variance)?;
    let alpha = solve_lower(&l, &DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
    let n = y.len() as f64;
    Ok(-0.5 * alpha.norm_squared() - log_diag_sum(&l) - 0.5 * n * (2.0 * PI).ln())
}

/// Exact joint posterior of the latent function at `xstar`.
pub fn exact_posterior(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
    xstar: &DMatrix<f64>,
) -> Result<GaussianDensity> {
    check(x, y, noise_variance)?;
    let l = noisy_factor(spec, x, noise_variance)?;
    let kfs = kernel_matrix(spec, x, xstar)?;
    let kss = kernel_matrix(spec, xstar, xstar)?;
    let v = solve_lower(&l, &kfs)?;
    let alpha = solve_lower(&l, &DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
    let mean = v.tr_mul(&alpha);
    let covariance = kss - v.tr_mul(&v);
    Ok(GaussianDensity {
        mean: DVector::from_column_slice(mean.as_slice()),
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(v: &[f64], d: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(v.len() / d, d, v)
    }

    /// log N(y|0, Σ) from an explicit inverse and determinant.
    fn dense_oracle(spec: &KernelSpec, x: &DMatrix<f64>, y: &DVector<f64>, s2: f64) -> f64 {
        let n = y.len();
        let sigma = kernel_matrix(spec, x, x).unwrap() + DMatrix::identity(n, n) * s2;
        let inv = sigma.clone().try_inverse().unwrap();
        -0.5 * (y.transpose() * inv * y)[(0, 0)]
            - 0.5 * sigma.determinant().ln()
            - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn scalar_gaussian_at_zero() {
        let spec = KernelSpec::squared_exponential(1.0, 1.0);
        let v = dense_log_marginal(&spec, &points(&[0.3], 1), &DVector::zeros(1), 1.0).unwrap();
        assert!((v + 0.5 * (4.0 * PI).ln()).abs() < 1e-9);
    }

    #[test]
    fn log_marginal_matches_dense_formula() {
        let spec = KernelSpec::matern32(0.8, 1.4);
        let x = points(&[0.1, 0.5, -0.7, 0.2, 1.3, -0.4], 2);
        let y = DVector::from_vec(vec![0.3, -1.1, 0.8]);
        let got = dense_log_marginal(&spec, &x, &y, 0.2).unwrap();
        assert!((got - dense_oracle(&spec, &x, &y, 0.2)).abs() < 1e-8);
    }

    #[test]
    fn prior_recovered_far_from_data() {
        let spec = KernelSpec::squared_exponential(0.5, 1.7);
        let x = points(&[0.0, 0.3, 0.6], 1);
        let y = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let post = exact_posterior(&spec, &x, &y, 0.1, &points(&[100.0], 1)).unwrap();
        assert!(post.mean[0].abs() < 1e-8);
        assert!((post.covariance[(0, 0)] - 1.7).abs() < 1e-8);
    }

    #[test]
    fn interpolates_in_noise_free_limit() {
        let spec = KernelSpec::squared_exponential(0.7, 1.0);
        let x = points(&[0.0, 0.9, 2.1], 1);
        let y = DVector::from_vec(vec![0.4, -0.2, 1.0]);
        let post = exact_posterior(&spec, &x, &y, 1e-10, &x).unwrap();
        assert!((post.mean - y).amax() < 1e-6);
    }

    #[test]
    fn posterior_matches_dense_formula() {
        let spec = KernelSpec::squared_exponential(0.9, 1.2);
        let x = points(&[0.0, 0.4, 1.1, 2.0], 1);
        let y = DVector::from_vec(vec![0.2, 0.6, -0.4, 0.9]);
        let xs = points(&[0.7, 1.6], 1);
        let s2 = 0.05;
        let post = exact_posterior(&spec, &x, &y, s2, &xs).unwrap();
        let inv = (kernel_matrix(&spec, &x, &x).unwrap() + DMatrix::identity(4, 4) * s2)
            .try_inverse()
            .unwrap();
        let ksf = kernel_matrix(&spec, &xs, &x).unwrap();
        let mean = &ksf * &inv * &y;
        let cov = kernel_matrix(&spec, &xs, &xs).unwrap() - &ksf * &inv * ksf.transpose();
        // The relative 1e-10 jitter moves the answer by about 1e-10 here.
        assert!((post.mean - mean).amax() < 1e-8);
        assert!((post.covariance - cov).amax() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = KernelSpec::squared_exponential(1.0, 1.0);
        let x = points(&[0.0, 1.0], 1);
        assert!(dense_log_marginal(&spec, &x, &DVector::zeros(3), 0.1).is_err());
        assert!(dense_log_marginal(&spec, &x, &DVector::zeros(2), 0.0).is_err());
    }
}
