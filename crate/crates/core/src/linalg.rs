//! Dense linear-algebra helpers: jittered Cholesky, triangular solves and
//! the per-evaluation operation counter.

use std::cell::{Cell, RefCell};

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// Escalating diagonal jitter, relative to the mean of the diagonal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterPolicy {
    pub start: f64,
    pub max: f64,
    pub factor: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            start: 1e-10,
            max: 1e-4,
            factor: 10.0,
        }
    }
}

thread_local! {
    static JITTER: Cell<JitterPolicy> = Cell::new(JitterPolicy::default());
    static COUNTER: RefCell<Option<OpCounter>> = const { RefCell::new(None) };
}

/// Runs `f` with a different starting jitter on this thread.
pub fn with_jitter_start<T>(start: f64, f: impl FnOnce() -> T) -> T {
    let previous = JITTER.with(|j| j.get());
    JITTER.with(|j| j.set(JitterPolicy { start, ..previous }));
    let out = f();
    JITTER.with(|j| j.set(previous));
    out
}

pub fn jitter_policy() -> JitterPolicy {
    JITTER.with(|j| j.get())
}

/// Counts of cubic-cost operations performed during one evaluation.
///
/// Sizes are recorded in call order. Only forward computations are
/// recorded; reverse sweeps are not instrumented.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    /// Sizes of successful Cholesky factorizations.
    pub cholesky: Vec<usize>,
    /// Factorization attempts rejected before jitter escalation succeeded.
    pub failed_cholesky: usize,
    /// Triangular solves as (triangle size, right-hand-side columns).
    pub triangular_solves: Vec<(usize, usize)>,
    /// Matrix products as (rows, inner, cols).
    pub matmuls: Vec<(usize, usize, usize)>,
}

impl OpCounter {
    /// Runs `f` with a fresh counter installed and returns what it recorded.
    /// Counts also propagate to any enclosing scope.
    pub fn scope<T>(f: impl FnOnce() -> T) -> (T, OpCounter) {
        let outer = COUNTER.with(|c| c.borrow_mut().replace(OpCounter::default()));
        let out = f();
        let inner = COUNTER.with(|c| c.borrow_mut().take()).unwrap_or_default();
        if let Some(mut outer) = outer {
            outer.merge(&inner);
            COUNTER.with(|c| *c.borrow_mut() = Some(outer));
        }
        (out, inner)
    }

    pub fn merge(&mut self, other: &OpCounter) {
        self.cholesky.extend_from_slice(&other.cholesky);
        self.failed_cholesky += other.failed_cholesky;
        self.triangular_solves
            .extend_from_slice(&other.triangular_solves);
        self.matmuls.extend_from_slice(&other.matmuls);
    }

    /// Cholesky sizes sorted ascending, the form reported in metric traces.
    pub fn cholesky_sizes(&self) -> Vec<usize> {
        let mut sizes = self.cholesky.clone();
        sizes.sort_unstable();
        sizes
    }

    /// Cost of the recorded factorizations in units of c (cost = c n³).
    pub fn cholesky_cost(&self) -> f64 {
        self.cholesky.iter().map(|&n| (n as f64).powi(3)).sum()
    }

    fn with(f: impl FnOnce(&mut OpCounter)) {
        COUNTER.with(|c| {
            if let Some(counter) = c.borrow_mut().as_mut() {
                f(counter);
            }
        });
    }

    pub(crate) fn record_cholesky(n: usize) {
        Self::with(|c| c.cholesky.push(n));
    }

    pub(crate) fn record_failed_cholesky() {
        Self::with(|c| c.failed_cholesky += 1);
    }

    pub(crate) fn record_solve(n: usize, cols: usize) {
        Self::with(|c| c.triangular_solves.push((n, cols)));
    }

    pub(crate) fn record_matmul(rows: usize, inner: usize, cols: usize) {
        Self::with(|c| c.matmuls.push((rows, inner, cols)));
    }
}

/// Jitter amount that would be added for a matrix with the given diagonal
/// at the given relative level.
fn jitter_amount(a: &DMatrix<f64>, level: f64) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
    // An all-zero diagonal still needs a strictly positive shift.
    level * mean_diag.abs().max(f64::MIN_POSITIVE)
}

/// Lower Cholesky factor of `a + jitter·mean(diag a)·I` with escalating
/// jitter. Returns the factor and the absolute diagonal shift used.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(GpError::dim(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if n == 0 {
        OpCounter::record_cholesky(0);
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(GpError::Numerical(format!(
            "non-finite entry in {n}x{n} matrix passed to cholesky"
        )));
    }
    let policy = jitter_policy();
    let mut level = policy.start;
    loop {
        let shift = jitter_amount(a, level);
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let l = chol.unpack();
            if l.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                OpCounter::record_cholesky(n);
                return Ok((l, shift));
            }
        }
        OpCounter::record_failed_cholesky();
        if level >= policy.max {
            return Err(GpError::Factorization {
                size: n,
                jitter: level,
            });
        }
        level *= policy.factor;
        // Snap to the cap so rounding in the products cannot skip it.
        if level >= policy.max * (1.0 - 1e-9) {
            level = policy.max;
        }
    }
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_solve(l, b)?;
    OpCounter::record_solve(l.nrows(), b.ncols());
    l.solve_lower_triangular(b)
        .ok_or_else(|| GpError::Numerical("singular triangular factor".into()))
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_solve(l, b)?;
    OpCounter::record_solve(l.nrows(), b.ncols());
    l.tr_solve_lower_triangular(b)
        .ok_or_else(|| GpError::Numerical("singular triangular factor".into()))
}

fn check_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if l.nrows() != l.ncols() || l.nrows() != b.nrows() {
        return Err(GpError::dim(format!(
            "triangular solve with {}x{} factor and {}x{} rhs",
            l.nrows(),
            l.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

pub fn matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    OpCounter::record_matmul(a.nrows(), a.ncols(), b.ncols());
    a * b
}

/// Column sums of squares: entry j is Σᵢ a[i, j]².
pub fn col_sum_sq(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.ncols(), a.column_iter().map(|c| c.norm_squared()))
}

/// Sum of log of the diagonal of a triangular factor.
pub fn log_diag_sum(l: &DMatrix<f64>) -> f64 {
    l.diagonal().iter().map(|d| d.ln()).sum()
}

/// Keeps the lower triangle (including the diagonal), zeroing the rest.
pub fn tril(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.lower_triangle()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jittered_cholesky_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 3.0, 0.4, 0.6, 0.4, 2.0]);
        let (l, shift) = cholesky_jittered(&a).unwrap();
        let rebuilt = &l * l.transpose();
        let mean_diag = 3.0;
        assert!((shift - 1e-10 * mean_diag).abs() < 1e-20);
        for i in 0..3 {
            for j in 0..3 {
                let expect = a[(i, j)] + if i == j { shift } else { 0.0 };
                assert!((rebuilt[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_psd_matrix_needs_escalation() {
        // Smallest eigenvalue about -5e-10.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-9]);
        let ((l, shift), counts) = OpCounter::scope(|| cholesky_jittered(&a).unwrap());
        assert!(shift > 1e-10 * a.diagonal().mean());
        assert!(l.diagonal().iter().all(|d| *d > 0.0));
        assert_eq!(counts.cholesky, vec![2]);
        assert!(counts.failed_cholesky >= 1);
    }

    #[test]
    fn indefinite_matrix_reports_final_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match cholesky_jittered(&a) {
            Err(GpError::Factorization { size, jitter }) => {
                assert_eq!(size, 2);
                assert_eq!(jitter, 1e-4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn counter_scopes_nest() {
        let a = DMatrix::<f64>::identity(2, 2);
        let (_, outer) = OpCounter::scope(|| {
            cholesky_jittered(&a).unwrap();
            let (_, inner) = OpCounter::scope(|| cholesky_jittered(&DMatrix::identity(4, 4)).unwrap());
            assert_eq!(inner.cholesky, vec![4]);
        });
        assert_eq!(outer.cholesky, vec![2, 4]);
    }

    #[test]
    fn no_recording_outside_scope() {
        cholesky_jittered(&DMatrix::identity(2, 2)).unwrap();
        let (_, c) = OpCounter::scope(|| ());
        assert!(c.cholesky.is_empty());
    }
}
