//! Gradient-based maximization of a bound: gradients in unconstrained
//! coordinates, finite-difference auditing, Adam and the minibatch loop.

pub mod params;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::linalg::{with_jitter_start, OpCounter};
use crate::tape::Tape;

pub use params::{ParamBlock, ParamVector, Trainable, Transform};

/// Bound value and, when requested, its gradient in unconstrained
/// coordinates, evaluated at `p` without touching the model.
pub fn evaluate<M: Trainable + ?Sized>(
    model: &M,
    p: &ParamVector,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    scale: f64,
    seed: u64,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let tape = Tape::new();
    let blocks = p.unpack();
    let vars: Vec<_> = blocks
        .into_iter()
        .map(|b| {
            if with_gradient {
                tape.leaf(b)
            } else {
                tape.constant(b)
            }
        })
        .collect();
    let out = model.bound_graph(&tape, &vars, x, y, scale, seed)?;
    let value = out.scalar_value();
    if !value.is_finite() {
        return Err(GpError::Numerical(format!("bound evaluated to {value}")));
    }
    if !with_gradient {
        return Ok((value, None));
    }
    let grads = tape.gradient(out);
    let constrained: Vec<_> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let g = p.chain_rule(&constrained);
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        let block = p.block_of(i).unwrap_or("?").to_string();
        return Err(GpError::NonFiniteGradient(block));
    }
    Ok((value, Some(g)))
}

/// Gradient of the bound with respect to the unconstrained parameters.
pub fn gradient<M: Trainable + ?Sized>(
    model: &M,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = model.param_vector()?;
    Ok(evaluate(model, &p, x, y, scale, seed, true)?.1.unwrap_or_default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub max_rel_error: f64,
    /// Coordinate with the worst error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares `grad` with central differences of `f` at `params`. The step
/// for coordinate i is `step·max(1, |pᵢ|)`; errors are relative to
/// max(|gᵢ|, 1e-8).
pub fn finite_diff_audit(
    f: impl Fn(&[f64]) -> Result<f64>,
    params: &[f64],
    grad: &[f64],
    step: f64,
) -> Result<AuditReport> {
    if !(step > 0.0) {
        return Err(GpError::arg("finite-difference step must be positive"));
    }
    if grad.len() != params.len() {
        return Err(GpError::dim("gradient and parameter lengths differ"));
    }
    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = (0.0, 0);
    let mut p = params.to_vec();
    for i in 0..params.len() {
        let h = step * params[i].abs().max(1.0);
        p[i] = params[i] + h;
        let up = f(&p)?;
        p[i] = params[i] - h;
        let down = f(&p)?;
        p[i] = params[i];
        let d = (up - down) / (2.0 * h);
        let err = (d - grad[i]).abs() / grad[i].abs().max(1e-8);
        if err > worst.0 || i == 0 {
            worst = (err, i);
        }
        numeric.push(d);
    }
    Ok(AuditReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic: grad.to_vec(),
        numeric,
    })
}

/// Audits the tape gradient of a model's bound at its current parameters.
pub fn audit_model<M: Trainable + ?Sized>(
    model: &M,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    scale: f64,
    seed: u64,
    step: f64,
) -> Result<AuditReport> {
    let p = model.param_vector()?;
    let g = evaluate(model, &p, x, y, scale, seed, true)?.1.unwrap_or_default();
    finite_diff_audit(
        |raw| Ok(evaluate(model, &p.with_values(raw.to_vec()), x, y, scale, seed, false)?.0),
        &p.values,
        &g,
        step,
    )
}

/// Adam moments for ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected step along `grad` (maximization). `iteration`
    /// counts from 1.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], iteration: usize) {
        let t = iteration.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] += self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Multiply the learning rate by `factor` every `every` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anneal {
    pub factor: f64,
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Rows per minibatch; 0 means the full training set.
    pub batch_size: usize,
    pub seed: u64,
    pub anneal: Option<Anneal>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub jitter_start: f64,
    /// Report wall_ms as 0 so that traces are byte-for-byte reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            iterations: 1000,
            batch_size: 0,
            seed: 0,
            anneal: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            jitter_start: 1e-10,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |field: &str, why: &str| Err(GpError::arg(format!("{field}: {why}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size > n {
            return bad("batch_size", &format!("exceeds the {n} training points"));
        }
        if n == 0 {
            return bad("dataset", "no training points");
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(name, "must lie in (0, 1)");
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon", "must be positive");
        }
        if !(self.jitter_start > 0.0 && self.jitter_start <= 1e-4) {
            return bad("jitter_start", "must lie in (0, 1e-4]");
        }
        if let Some(a) = self.anneal {
            if !(a.factor > 0.0) || a.every == 0 {
                return bad("anneal", "factor must be positive and every at least 1");
            }
        }
        Ok(())
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        if self.batch_size == 0 {
            n
        } else {
            self.batch_size
        }
    }
}

/// One line of the metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Bound estimate on the minibatch, before the update.
    pub bound: f64,
    pub wall_ms: f64,
    pub chol_sizes: Vec<usize>,
}

/// Shuffled partitions of `0..n` into batches, one partition per epoch.
pub struct BatchSchedule {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSchedule {
            n,
            batch: batch.clamp(1, n.max(1)),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: n,
        }
    }

    /// Next batch of row indices. The last batch of an epoch may be
    /// shorter when the batch size does not divide n.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.order = (0..self.n).collect();
            if self.batch < self.n {
                crate::data::shuffle_with(&mut self.order, &mut self.rng);
            }
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.n);
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

pub fn select_rows(x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let xb = DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)]);
    let yb = DVector::from_fn(rows.len(), |i, _| y[rows[i]]);
    (xb, yb)
}

/// Runs Adam on the model's bound. Each record is passed to `on_record`
/// as it is produced. On failure the model keeps the last parameters that
/// evaluated cleanly and the error carries the iteration.
pub fn train<M: Trainable + ?Sized>(
    model: &mut M,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &TrainConfig,
    mut on_record: impl FnMut(&IterRecord) -> Result<()>,
) -> Result<()> {
    let n = x.nrows();
    if y.len() != n {
        return Err(GpError::dim(format!("{n} inputs but {} targets", y.len())));
    }
    config.validate(n)?;
    let batch = config.effective_batch(n);
    let mut schedule = BatchSchedule::new(n, batch, config.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(1);
    let mut p = model.param_vector()?;
    let mut adam = Adam::new(
        p.len(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_epsilon,
    );
    let start = Instant::now();
    with_jitter_start(config.jitter_start, || {
        for iter in 1..=config.iterations {
            let rows = schedule.next_batch();
            let (xb, yb) = if batch == n {
                (x.clone(), y.clone())
            } else {
                select_rows(x, y, &rows)
            };
            let scale = n as f64 / rows.len() as f64;
            let seed = sample_rng.next_u64();
            let (res, ops) = OpCounter::scope(|| evaluate(model, &p, &xb, &yb, scale, seed, true));
            let abort = |e: GpError| GpError::Aborted {
                iteration: iter,
                source: Box::new(e),
            };
            let (bound, grad) = res.map_err(abort)?;
            let grad = grad.unwrap_or_default();
            let wall_ms = if config.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64() * 1e3
            };
            on_record(&IterRecord {
                iter,
                bound,
                wall_ms,
                chol_sizes: ops.cholesky_sizes(),
            })?;
            if let Some(a) = config.anneal {
                if iter > 1 && (iter - 1) % a.every == 0 {
                    adam.learning_rate *= a.factor;
                }
            }
            let mut next = p.values.clone();
            adam.step(&mut next, &grad, iter);
            let candidate = p.with_values(next);
            let good: Vec<_> = model.param_blocks().into_iter().map(|b| b.value).collect();
            let accepted = model
                .load_param_vector(&candidate)
                .and_then(|_| model.param_vector())
                .and_then(|q| {
                    if q.values.iter().all(|v| v.is_finite()) {
                        Ok(())
                    } else {
                        Err(GpError::Numerical("non-finite parameter".into()))
                    }
                });
            if let Err(e) = accepted {
                model.set_param_blocks(&good)?;
                return Err(abort(GpError::Numerical(format!("update left the parameter domain: {e}"))));
            }
            p = candidate;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::svgp::{svgp_bound, SvgpState};
    use crate::variational::GaussianLikelihood;

    #[test]
    fn quadratic_audit_is_exact() {
        let p = [0.3, -1.2, 4.0];
        let g: Vec<f64> = p.iter().map(|v| -v).collect();
        let f = |q: &[f64]| Ok(-0.5 * q.iter().map(|v| v * v).sum::<f64>());
        let r = finite_diff_audit(f, &p, &g, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9);
        let wrong = [0.0, 1.2, -4.0];
        assert!(finite_diff_audit(f, &p, &wrong, 1e-5).unwrap().max_rel_error > 0.5);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut a = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0];
        a.step(&mut p, &[0.0, 0.0], 1);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut a = Adam::new(3, 0.01, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0; 3];
        a.step(&mut p, &[5.0, -0.3, 200.0], 1);
        for (got, s) in p.iter().zip([1.0, -1.0, 1.0]) {
            assert!((got - 0.01 * s).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_matches_reference_trace() {
        // Ascent on f(p) = -(p0 - 1)^2 - 3 (p1 + 2)^2 from (0, 0) with
        // lr 0.1, produced by a separate Python implementation.
        let reference = [
            [0.0999999995, -0.09999999991666668],
            [0.19958777130820715, -0.1998335142212267],
            [0.29841372705396974, -0.2993766084639673],
            [0.3960609394262539, -0.3984951053973204],
            [0.49203634073565794, -0.49704421957030387],
            [0.585763544006338, -0.5948682708853926],
            [0.6765792950608979, -0.691800505612626],
            [0.7637362754789581, -0.7876630582796402],
            [0.8464154399296363, -0.8822670926230968],
            [0.9237508443930877, -0.975413163939639],
        ];
        let mut a = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 0.0];
        for (t, want) in reference.iter().enumerate() {
            let g = [-2.0 * (p[0] - 1.0), -6.0 * (p[1] + 2.0)];
            a.step(&mut p, &g, t + 1);
            assert!((p[0] - want[0]).abs() < 1e-12, "step {t}: {}", p[0]);
            assert!((p[1] - want[1]).abs() < 1e-12, "step {t}: {}", p[1]);
        }
    }

    #[test]
    fn schedule_partitions_each_epoch() {
        let mut s = BatchSchedule::new(10, 4, 7);
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        let a: Vec<_> = {
            let mut s = BatchSchedule::new(10, 4, 7);
            (0..6).map(|_| s.next_batch()).collect()
        };
        let b: Vec<_> = {
            let mut s = BatchSchedule::new(10, 4, 7);
            (0..6).map(|_| s.next_batch()).collect()
        };
        assert_eq!(a, b);
    }

    fn tiny() -> (SvgpState, DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_column_slice(6, 1, &[-1.5, -0.9, -0.1, 0.4, 1.1, 1.8]);
        let y = DVector::from_vec(vec![0.4, 0.9, 0.2, -0.5, -0.8, 0.1]);
        let s = SvgpState::new(
            KernelSpec::squared_exponential(1.0, 1.0),
            GaussianLikelihood::new(0.1).unwrap(),
            DMatrix::from_column_slice(3, 1, &[-1.0, 0.3, 1.2]),
            false,
        )
        .unwrap();
        (s, x, y)
    }

    #[test]
    fn zero_data_gradient_vanishes_at_prior_mean() {
        let (s, _, _) = tiny();
        let g = gradient(&s, &DMatrix::zeros(0, 1), &DVector::zeros(0), 1.0, 0).unwrap();
        let p = s.param_vector().unwrap();
        let b = p.layout.iter().find(|b| b.name == "m_u").unwrap();
        assert!(g[b.offset..b.offset + b.len].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn svgp_gradient_matches_central_differences() {
        let (mut s, x, y) = tiny();
        s.q_u.mean = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let r = audit_model(&s, &x, &y, 1.0, 0, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn partition_average_recovers_full_data_term() {
        let (s, x, y) = tiny();
        let empty = svgp_bound(&s, &DMatrix::zeros(0, 1), &DVector::zeros(0), 1.0).unwrap();
        let full = svgp_bound(&s, &x, &y, 1.0).unwrap() - empty;
        let mut sched = BatchSchedule::new(6, 2, 3);
        let mut total = 0.0;
        for _ in 0..3 {
            let (xb, yb) = select_rows(&x, &y, &sched.next_batch());
            total += svgp_bound(&s, &xb, &yb, 3.0).unwrap() - empty;
        }
        assert!((total / 3.0 - full).abs() < 1e-10);
    }

    #[test]
    fn full_batch_training_is_monotone() {
        let (mut s, x, y) = tiny();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            iterations: 200,
            deterministic: true,
            ..TrainConfig::default()
        };
        let mut bounds = Vec::new();
        train(&mut s, &x, &y, &cfg, |r| {
            bounds.push(r.bound);
            Ok(())
        })
        .unwrap();
        assert_eq!(bounds.len(), 200);
        for w in bounds.windows(2) {
            assert!(w[1] >= w[0] - 1e-3, "{} -> {}", w[0], w[1]);
        }
        assert!(bounds[199] > bounds[0]);
    }

    #[test]
    fn zero_iterations_leave_model_untouched() {
        let (mut s, x, y) = tiny();
        let before = s.clone();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        train(&mut s, &x, &y, &cfg, |_| Ok(())).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = TrainConfig {
            batch_size: 50,
            ..TrainConfig::default()
        };
        let err = cfg.validate(10).unwrap_err().to_string();
        assert!(err.contains("batch_size"));
        let cfg = TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(10).unwrap_err().to_string().contains("adam_beta1"));
    }
}
