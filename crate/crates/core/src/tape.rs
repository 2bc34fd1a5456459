//! Matrix-level reverse-mode differentiation.
//!
//! Every bound in the crate is written once against [`Var`]; plain
//! evaluation builds a tape and reads the output value, training
//! additionally runs [`Tape::gradient`]. Nodes hold dense matrices and the
//! adjoint of each operation is hand-derived (Cholesky, triangular solves,
//! kernel matrices included). Scalars are 1×1 matrices, vectors are
//! single columns.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::error::Result;
use crate::kernels::{kernel_matrix, kernel_matrix_adjoint, KernelFamily, KernelSpec};
use crate::linalg::{self, OpCounter};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    /// Aᵀ B
    MatMulTN(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Sum(usize),
    SumSq(usize),
    ColSumSq(usize),
    Diag(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    Kernel {
        a: usize,
        b: usize,
        lengthscale: usize,
        variance: usize,
        family: KernelFamily,
    },
    KernelDiag(usize),
    HStack(Vec<usize>),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.idx)
    }
}

/// Adjoints of every node with respect to one scalar output.
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> DMatrix<f64> {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                DMatrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DMatrix<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Const)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(DMatrix::from_element(1, 1, value))
    }

    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.constant(DMatrix::from_column_slice(values.len(), 1, values))
    }

    /// Kernel matrix between the rows of `a` and `b`, differentiable in the
    /// inputs and in the positive hyperparameters (each a 1×1 node).
    pub fn kernel<'t>(
        &'t self,
        family: KernelFamily,
        lengthscale: Var<'t>,
        variance: Var<'t>,
        a: Var<'t>,
        b: Var<'t>,
    ) -> Result<Var<'t>> {
        let k = {
            let nodes = self.nodes.borrow();
            let spec = KernelSpec {
                family,
                lengthscale: nodes[lengthscale.idx].value[(0, 0)],
                signal_variance: nodes[variance.idx].value[(0, 0)],
            };
            let av = &nodes[a.idx].value;
            if a.idx == b.idx {
                kernel_matrix(&spec, av, av)?
            } else {
                kernel_matrix(&spec, av, &nodes[b.idx].value)?
            }
        };
        Ok(self.push(
            k,
            Op::Kernel {
                a: a.idx,
                b: b.idx,
                lengthscale: lengthscale.idx,
                variance: variance.idx,
                family,
            },
        ))
    }

    /// Column of `rows` copies of the signal variance.
    pub fn kernel_diag<'t>(&'t self, variance: Var<'t>, rows: usize) -> Var<'t> {
        let v = self.nodes.borrow()[variance.idx].value[(0, 0)];
        self.push(DMatrix::from_element(rows, 1, v), Op::KernelDiag(variance.idx))
    }

    pub fn hstack<'t>(&'t self, cols: &[Var<'t>]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let rows = cols.first().map_or(0, |c| nodes[c.idx].value.nrows());
            let total: usize = cols.iter().map(|c| nodes[c.idx].value.ncols()).sum();
            let mut m = DMatrix::zeros(rows, total);
            let mut at = 0;
            for c in cols {
                let v = &nodes[c.idx].value;
                m.columns_mut(at, v.ncols()).copy_from(v);
                at += v.ncols();
            }
            m
        };
        self.push(value, Op::HStack(cols.iter().map(|c| c.idx).collect()))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn gradient(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = output.idx + 1;
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; nodes.len()];
        grads[output.idx] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }
}

fn accumulate(grads: &mut [Option<DMatrix<f64>>], idx: usize, g: DMatrix<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}

fn solve_lt(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("factor was invertible in the forward pass")
}

fn solve_l(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("factor was invertible in the forward pass")
}

fn backprop(nodes: &[Node], node: &Node, g: &DMatrix<f64>, grads: &mut [Option<DMatrix<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::MatMul(a, b) => {
            accumulate(grads, *a, g * val(*b).transpose());
            accumulate(grads, *b, val(*a).transpose() * g);
        }
        Op::MatMulTN(a, b) => {
            accumulate(grads, *a, val(*b) * g.transpose());
            accumulate(grads, *b, val(*a) * g);
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, -g);
        }
        Op::Hadamard(a, b) => {
            accumulate(grads, *a, g.component_mul(val(*b)));
            accumulate(grads, *b, g.component_mul(val(*a)));
        }
        Op::Scale(a, c) => accumulate(grads, *a, g * *c),
        Op::MulScalar(a, s) => {
            let sv = val(*s)[(0, 0)];
            accumulate(grads, *s, DMatrix::from_element(1, 1, val(*a).dot(g)));
            accumulate(grads, *a, g * sv);
        }
        Op::DivScalar(a, s) => {
            let sv = val(*s)[(0, 0)];
            accumulate(
                grads,
                *s,
                DMatrix::from_element(1, 1, -val(*a).dot(g) / (sv * sv)),
            );
            accumulate(grads, *a, g / sv);
        }
        Op::Log(a) => accumulate(grads, *a, g.component_div(val(*a))),
        Op::Exp(a) => accumulate(grads, *a, g.component_mul(&node.value)),
        Op::Sqrt(a) => {
            let ga = g.zip_map(&node.value, |gi, r| if r > 0.0 { gi / (2.0 * r) } else { 0.0 });
            accumulate(grads, *a, ga);
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
        }
        Op::SumSq(a) => accumulate(grads, *a, val(*a) * (2.0 * g[(0, 0)])),
        Op::ColSumSq(a) => {
            let mut ga = val(*a).clone();
            for (j, mut col) in ga.column_iter_mut().enumerate() {
                col *= 2.0 * g[(j, 0)];
            }
            accumulate(grads, *a, ga);
        }
        Op::Diag(a) => {
            let n = val(*a).nrows();
            let mut ga = DMatrix::zeros(n, n);
            for i in 0..n {
                ga[(i, i)] = g[(i, 0)];
            }
            accumulate(grads, *a, ga);
        }
        Op::Cholesky(a) => {
            // Symmetric adjoint: Ā = ½(S + Sᵀ), S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹ where Φ
            // keeps the lower triangle and halves the diagonal.
            let l = &node.value;
            let lbar = g.lower_triangle();
            let mut p = (l.transpose() * lbar).lower_triangle();
            for i in 0..p.nrows() {
                p[(i, i)] *= 0.5;
            }
            let x = solve_lt(l, &p);
            let s = solve_lt(l, &x.transpose()).transpose();
            accumulate(grads, *a, (&s + s.transpose()) * 0.5);
        }
        Op::SolveLower(l, b) => {
            // X = L⁻¹B
            let bbar = solve_lt(val(*l), g);
            let lbar = -(&bbar * node.value.transpose()).lower_triangle();
            accumulate(grads, *l, lbar);
            accumulate(grads, *b, bbar);
        }
        Op::SolveLowerT(l, b) => {
            // X = L⁻ᵀB
            let bbar = solve_l(val(*l), g);
            let lbar = -(&node.value * bbar.transpose()).lower_triangle();
            accumulate(grads, *l, lbar);
            accumulate(grads, *b, bbar);
        }
        Op::Kernel {
            a,
            b,
            lengthscale,
            variance,
            family,
        } => {
            let spec = KernelSpec {
                family: *family,
                lengthscale: val(*lengthscale)[(0, 0)],
                signal_variance: val(*variance)[(0, 0)],
            };
            let adj = kernel_matrix_adjoint(&spec, val(*a), val(*b), &node.value, g);
            accumulate(grads, *a, adj.a);
            accumulate(grads, *b, adj.b);
            accumulate(grads, *lengthscale, DMatrix::from_element(1, 1, adj.lengthscale));
            accumulate(grads, *variance, DMatrix::from_element(1, 1, adj.signal_variance));
        }
        Op::KernelDiag(v) => accumulate(grads, *v, DMatrix::from_element(1, 1, g.sum())),
        Op::HStack(cols) => {
            let mut at = 0;
            for &c in cols {
                let w = val(c).ncols();
                accumulate(grads, c, g.columns(at, w).into_owned());
                at += w;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the node's value.
    pub fn value(&self) -> Ref<'t, DMatrix<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.idx].value)
    }

    pub fn scalar_value(&self) -> f64 {
        self.value()[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    fn unary(self, op: Op, f: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>) -> Var<'t> {
        let v = f(&self.value());
        self.tape.push(v, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.idx].value, &nodes[other.idx].value)
        };
        self.tape.push(v, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.idx, other.idx), linalg::matmul)
    }

    /// selfᵀ · other
    pub fn tr_matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMulTN(self.idx, other.idx), |a, b| {
            OpCounter::record_matmul(a.ncols(), a.nrows(), b.ncols());
            a.tr_mul(b)
        })
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.idx), |a| a.transpose())
    }

    pub fn hadamard(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Hadamard(self.idx, other.idx), |a, b| a.component_mul(b))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |a| a * c)
    }

    /// Multiplies every entry by the 1×1 node `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        self.binary(s, Op::MulScalar(self.idx, s.idx), |a, s| a * s[(0, 0)])
    }

    pub fn div_scalar(self, s: Var<'t>) -> Var<'t> {
        self.binary(s, Op::DivScalar(self.idx, s.idx), |a, s| a / s[(0, 0)])
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.idx), |a| a.map(f64::ln))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), |a| a.map(f64::exp))
    }

    /// Elementwise square root of max(x, 0); the derivative is zero where
    /// the input was clamped.
    pub fn sqrt_clamped(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.idx), |a| a.map(|x| x.max(0.0).sqrt()))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.idx), |a| DMatrix::from_element(1, 1, a.sum()))
    }

    pub fn sum_sq(self) -> Var<'t> {
        self.unary(Op::SumSq(self.idx), |a| {
            DMatrix::from_element(1, 1, a.norm_squared())
        })
    }

    /// Column `j` of the result is Σᵢ self[i, j]², as a column vector.
    pub fn col_sum_sq(self) -> Var<'t> {
        self.unary(Op::ColSumSq(self.idx), |a| {
            let v = linalg::col_sum_sq(a);
            DMatrix::from_column_slice(v.len(), 1, v.as_slice())
        })
    }

    pub fn diag(self) -> Var<'t> {
        self.unary(Op::Diag(self.idx), |a| {
            let d = a.diagonal();
            DMatrix::from_column_slice(d.len(), 1, d.as_slice())
        })
    }

    /// Σ log diag(self).
    pub fn log_diag_sum(self) -> Var<'t> {
        self.diag().ln().sum()
    }

    /// Lower Cholesky factor under the thread's jitter policy. The added
    /// jitter is a constant of the graph.
    pub fn cholesky(self) -> Result<Var<'t>> {
        let (l, _) = linalg::cholesky_jittered(&self.value())?;
        Ok(self.tape.push(l, Op::Cholesky(self.idx)))
    }

    /// self⁻¹ · b for lower-triangular self.
    pub fn solve_lower(self, b: Var<'t>) -> Result<Var<'t>> {
        let x = {
            let nodes = self.tape.nodes.borrow();
            linalg::solve_lower(&nodes[self.idx].value, &nodes[b.idx].value)?
        };
        Ok(self.tape.push(x, Op::SolveLower(self.idx, b.idx)))
    }

    /// self⁻ᵀ · b for lower-triangular self.
    pub fn solve_lower_t(self, b: Var<'t>) -> Result<Var<'t>> {
        let x = {
            let nodes = self.tape.nodes.borrow();
            linalg::solve_lower_transpose(&nodes[self.idx].value, &nodes[b.idx].value)?
        };
        Ok(self.tape.push(x, Op::SolveLowerT(self.idx, b.idx)))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add(self.idx, rhs.idx), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub(self.idx, rhs.idx), |a, b| a - b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}
