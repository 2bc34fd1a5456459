//! Stationary covariance functions with a single shared lengthscale.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern32,
}

/// A covariance function and its (positive) hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub signal_variance: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64, signal_variance: f64) -> Result<Self> {
        let spec = KernelSpec {
            family,
            lengthscale,
            signal_variance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn squared_exponential(lengthscale: f64, signal_variance: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            lengthscale,
            signal_variance,
        }
    }

    pub fn matern32(lengthscale: f64, signal_variance: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Matern32,
            lengthscale,
            signal_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.lengthscale) || !ok(self.signal_variance) {
            return Err(GpError::arg(format!(
                "kernel hyperparameters must be positive and finite (lengthscale {}, signal_variance {})",
                self.lengthscale, self.signal_variance
            )));
        }
        Ok(())
    }

    /// Covariance as a function of the squared distance between two points.
    #[inline]
    pub fn eval_sq_dist(&self, sq_dist: f64) -> f64 {
        let l = self.lengthscale;
        match self.family {
            KernelFamily::SquaredExponential => {
                self.signal_variance * (-0.5 * sq_dist / (l * l)).exp()
            }
            KernelFamily::Matern32 => {
                let a = SQRT3 * sq_dist.max(0.0).sqrt() / l;
                self.signal_variance * (1.0 + a) * (-a).exp()
            }
        }
    }
}

#[inline]
fn sq_dist_rows(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..a.ncols() {
        let d = a[(i, k)] - b[(j, k)];
        s += d * d;
    }
    s
}

/// k(x, x′) for two points given as slices.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(GpError::dim(format!(
            "kernel_eval on points of dimension {} and {}",
            x.len(),
            x2.len()
        )));
    }
    let sq: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(spec.eval_sq_dist(sq))
}

/// Kernel matrix between the rows of `a` and the rows of `b`.
pub fn kernel_matrix(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(GpError::dim(format!(
            "kernel_matrix on inputs of dimension {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let same = std::ptr::eq(a, b);
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            if same && j < i {
                k[(i, j)] = k[(j, i)];
            } else {
                k[(i, j)] = spec.eval_sq_dist(sq_dist_rows(a, i, b, j));
            }
        }
    }
    Ok(k)
}

/// Diagonal of the kernel matrix of `a` with itself.
pub fn kernel_diag(spec: &KernelSpec, a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_element(a.nrows(), spec.eval_sq_dist(0.0))
}

/// Reverse-mode adjoints of `K = kernel_matrix(a, b)` given `K̄`.
pub(crate) struct KernelAdjoint {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub lengthscale: f64,
    pub signal_variance: f64,
}

pub(crate) fn kernel_matrix_adjoint(
    spec: &KernelSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    kbar: &DMatrix<f64>,
) -> KernelAdjoint {
    let d = a.ncols();
    let l = spec.lengthscale;
    let s2 = spec.signal_variance;
    let mut abar = DMatrix::zeros(a.nrows(), d);
    let mut bbar = DMatrix::zeros(b.nrows(), d);
    let mut lbar = 0.0;
    let mut vbar = 0.0;
    let mut diff = RowDVector::zeros(d);
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let g = kbar[(i, j)];
            if g == 0.0 {
                continue;
            }
            let kij = k[(i, j)];
            vbar += g * kij / s2;
            let mut r2 = 0.0;
            for c in 0..d {
                diff[c] = a[(i, c)] - b[(j, c)];
                r2 += diff[c] * diff[c];
            }
            // dK/dx_a = coef · (x_a − x_b); dK/dℓ = dl.
            let (coef, dl) = match spec.family {
                KernelFamily::SquaredExponential => (-kij / (l * l), kij * r2 / (l * l * l)),
                KernelFamily::Matern32 => {
                    let a_ = SQRT3 * r2.sqrt() / l;
                    let e = (-a_).exp();
                    (-3.0 * s2 * e / (l * l), s2 * a_ * a_ * e / l)
                }
            };
            lbar += g * dl;
            for c in 0..d {
                let t = g * coef * diff[c];
                abar[(i, c)] += t;
                bbar[(j, c)] -= t;
            }
        }
    }
    KernelAdjoint {
        a: abar,
        b: bbar,
        lengthscale: lbar,
        signal_variance: vbar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(data: &[f64], d: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(data.len() / d, d, data)
    }

    #[test]
    fn zero_distance_gives_signal_variance() {
        let se = KernelSpec::squared_exponential(1.0, 1.0);
        assert_eq!(kernel_eval(&se, &[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let m = KernelSpec::matern32(0.37, 2.5);
        assert_eq!(kernel_eval(&m, &[4.0], &[4.0]).unwrap(), 2.5);
    }

    #[test]
    fn squared_distance_two_gives_exp_minus_one() {
        let se = KernelSpec::squared_exponential(1.0, 1.0);
        let v = kernel_eval(&se, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        // exp(-1) evaluated independently.
        assert!((v - 0.367_879_441_171_442_33).abs() < 1e-15);
    }

    #[test]
    fn matern_value_matches_hand_computation() {
        // r = 0.5, ℓ = 0.25, σ² = 2: a = 2√3, k = 2 (1 + 2√3) e^{-2√3}
        let m = KernelSpec::matern32(0.25, 2.0);
        let v = kernel_eval(&m, &[0.0], &[0.5]).unwrap();
        let expect = 2.0 * (1.0 + 2.0 * 3f64.sqrt()) * (-2.0 * 3f64.sqrt()).exp();
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let se = KernelSpec::squared_exponential(1.0, 1.0);
        assert!(matches!(kernel_eval(&se, &[0.0], &[0.0, 1.0]), Err(GpError::Dimension(_))));
        let a = rows(&[0.0, 1.0], 2);
        let b = rows(&[0.0, 1.0], 1);
        assert!(kernel_matrix(&se, &a, &b).is_err());
    }

    #[test]
    fn single_point_matrix() {
        let se = KernelSpec::squared_exponential(0.7, 1.9);
        let a = rows(&[0.1, 0.2], 2);
        let k = kernel_matrix(&se, &a, &a).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 1.9);
    }

    #[test]
    fn self_matrix_is_exactly_symmetric_with_constant_diagonal() {
        for spec in [KernelSpec::squared_exponential(0.8, 1.3), KernelSpec::matern32(0.8, 1.3)] {
            let a = rows(&[0.1, 0.2, -0.4, 0.9, 1.7, -0.3], 2);
            let k = kernel_matrix(&spec, &a, &a).unwrap();
            assert_eq!(k, k.transpose());
            assert!(k.diagonal().iter().all(|v| *v == 1.3));
        }
    }

    #[test]
    fn matrix_matches_entrywise_loop() {
        let spec = KernelSpec::matern32(0.6, 0.9);
        let a = rows(&[0.1, 0.2, -0.4, 0.9, 1.7, -0.3, 0.05, 0.5], 2);
        let b = rows(&[1.1, -0.2, 0.4, 0.4, -1.0, 0.0], 2);
        let k = kernel_matrix(&spec, &a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let ai: Vec<f64> = a.row(i).iter().copied().collect();
                let bj: Vec<f64> = b.row(j).iter().copied().collect();
                assert_eq!(k[(i, j)], kernel_eval(&spec, &ai, &bj).unwrap());
            }
        }
    }

    #[test]
    fn diag_matches_matrix_diagonal() {
        let spec = KernelSpec::squared_exponential(1.2, 0.3);
        let a = rows(&[0.0, 1.0, 2.0, 3.0, 4.0], 1);
        let d = kernel_diag(&spec, &a);
        assert!(d.iter().all(|v| *v == 0.3));
        assert_eq!(d, kernel_matrix(&spec, &a, &a).unwrap().diagonal());
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for spec in [KernelSpec::squared_exponential(0.7, 1.4), KernelSpec::matern32(0.7, 1.4)] {
            let a = rows(&[0.1, 0.2, -0.4, 0.9, 1.7, -0.3], 2);
            let b = rows(&[1.1, -0.2, 0.4, 0.45], 2);
            let w = DMatrix::from_fn(3, 2, |i, j| 0.3 + 0.2 * i as f64 - 0.5 * j as f64);
            let f = |s: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>| {
                kernel_matrix(s, a, b).unwrap().component_mul(&w).sum()
            };
            let k = kernel_matrix(&spec, &a, &b).unwrap();
            let adj = kernel_matrix_adjoint(&spec, &a, &b, &k, &w);
            let h = 1e-6;
            let mut sp = spec;
            sp.lengthscale += h;
            let mut sm = spec;
            sm.lengthscale -= h;
            let fd = (f(&sp, &a, &b) - f(&sm, &a, &b)) / (2.0 * h);
            assert!((fd - adj.lengthscale).abs() < 1e-7);
            for i in 0..3 {
                for c in 0..2 {
                    let mut ap = a.clone();
                    ap[(i, c)] += h;
                    let mut am = a.clone();
                    am[(i, c)] -= h;
                    let fd = (f(&spec, &ap, &b) - f(&spec, &am, &b)) / (2.0 * h);
                    assert!((fd - adj.a[(i, c)]).abs() < 1e-7);
                }
            }
            let fd_v = f(&spec, &a, &b) / spec.signal_variance;
            assert!((fd_v - adj.signal_variance).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_monotone(
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            y in proptest::collection::vec(-3.0f64..3.0, 3),
            l in 0.1f64..3.0,
            s in 0.1f64..3.0,
            t in 0.0f64..1.0,
        ) {
            for spec in [KernelSpec::squared_exponential(l, s), KernelSpec::matern32(l, s)] {
                let kxy = kernel_eval(&spec, &x, &y).unwrap();
                let kyx = kernel_eval(&spec, &y, &x).unwrap();
                prop_assert_eq!(kxy, kyx);
                prop_assert!(kxy.abs() <= s);
                // Moving y toward x cannot decrease the covariance.
                let closer: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + t * (b - a)).collect();
                prop_assert!(kernel_eval(&spec, &x, &closer).unwrap() >= kxy - 1e-15);
            }
        }

        #[test]
        fn cross_matrix_transposes(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            b in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let spec = KernelSpec::matern32(0.9, 1.1);
            let a = rows(&a, 2);
            let b = rows(&b, 2);
            let kab = kernel_matrix(&spec, &a, &b).unwrap();
            let kba = kernel_matrix(&spec, &b, &a).unwrap();
            prop_assert_eq!(kab, kba.transpose());
        }
    }
}
