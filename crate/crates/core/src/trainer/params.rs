//! Flattened unconstrained parameters and the transforms that map them to
//! model quantities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::tape::{Tape, Var};

/// How a block of unconstrained values maps to the model quantity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Means and inducing locations.
    Identity,
    /// Positive scalars: value = exp(raw).
    Log,
    /// Lower-triangular scale factors: diagonal = softplus(raw), strict
    /// lower triangle unchanged. Only the lower triangle is stored.
    TrilSoftplus,
}

/// One named model quantity in constrained form.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub transform: Transform,
    pub value: DMatrix<f64>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, transform: Transform, value: DMatrix<f64>) -> Self {
        ParamBlock {
            name: name.into(),
            transform,
            value,
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, Transform::Log, DMatrix::from_element(1, 1, value))
    }

    pub fn column(name: impl Into<String>, value: &DVector<f64>) -> Self {
        Self::new(
            name,
            Transform::Identity,
            DMatrix::from_column_slice(value.len(), 1, value.as_slice()),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub name: String,
    pub transform: Transform,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
}

/// Unconstrained coordinates of every trainable block, concatenated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<BlockLayout>,
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inverse(y: f64) -> f64 {
    // y + log(1 - e^{-y})
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ParamVector {
    pub fn pack(blocks: &[ParamBlock]) -> Result<Self> {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(blocks.len());
        for b in blocks {
            let (rows, cols) = b.value.shape();
            let offset = values.len();
            match b.transform {
                Transform::Identity => values.extend(b.value.iter().copied()),
                Transform::Log => {
                    for &v in b.value.iter() {
                        if !(v > 0.0) {
                            return Err(GpError::arg(format!(
                                "block `{}` must be positive, got {v}",
                                b.name
                            )));
                        }
                        values.push(v.ln());
                    }
                }
                Transform::TrilSoftplus => {
                    if rows != cols {
                        return Err(GpError::dim(format!("block `{}` is not square", b.name)));
                    }
                    for i in 0..rows {
                        for j in 0..=i {
                            let v = b.value[(i, j)];
                            if i == j {
                                if !(v > 0.0) {
                                    return Err(GpError::arg(format!(
                                        "block `{}` has non-positive diagonal {v}",
                                        b.name
                                    )));
                                }
                                values.push(softplus_inverse(v));
                            } else {
                                values.push(v);
                            }
                        }
                    }
                }
            }
            layout.push(BlockLayout {
                name: b.name.clone(),
                transform: b.transform,
                rows,
                cols,
                offset,
                len: values.len() - offset,
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        ParamVector {
            values,
            layout: self.layout.clone(),
        }
    }

    /// Constrained matrices, in block order.
    pub fn unpack(&self) -> Vec<DMatrix<f64>> {
        self.layout
            .iter()
            .map(|b| {
                let raw = &self.values[b.offset..b.offset + b.len];
                match b.transform {
                    Transform::Identity => DMatrix::from_column_slice(b.rows, b.cols, raw),
                    Transform::Log => {
                        DMatrix::from_iterator(b.rows, b.cols, raw.iter().map(|v| v.exp()))
                    }
                    Transform::TrilSoftplus => {
                        let mut m = DMatrix::zeros(b.rows, b.cols);
                        let mut k = 0;
                        for i in 0..b.rows {
                            for j in 0..=i {
                                m[(i, j)] = if i == j { softplus(raw[k]) } else { raw[k] };
                                k += 1;
                            }
                        }
                        m
                    }
                }
            })
            .collect()
    }

    /// Maps gradients with respect to the constrained blocks to the
    /// unconstrained coordinates.
    pub fn chain_rule(&self, constrained: &[DMatrix<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (b, g) in self.layout.iter().zip(constrained) {
            let raw = &self.values[b.offset..b.offset + b.len];
            let dst = &mut out[b.offset..b.offset + b.len];
            match b.transform {
                Transform::Identity => dst.copy_from_slice(g.as_slice()),
                Transform::Log => {
                    for ((d, r), gi) in dst.iter_mut().zip(raw).zip(g.iter()) {
                        *d = gi * r.exp();
                    }
                }
                Transform::TrilSoftplus => {
                    let mut k = 0;
                    for i in 0..b.rows {
                        for j in 0..=i {
                            dst[k] = if i == j {
                                g[(i, j)] * sigmoid(raw[k])
                            } else {
                                g[(i, j)]
                            };
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Name of the block that owns coordinate `index`.
    pub fn block_of(&self, index: usize) -> Option<&str> {
        self.layout
            .iter()
            .find(|b| index >= b.offset && index < b.offset + b.len)
            .map(|b| b.name.as_str())
    }
}

/// A model whose lower bound can be built on a tape from its parameter
/// blocks.
pub trait Trainable {
    /// Trainable quantities in constrained form, in a fixed order.
    fn param_blocks(&self) -> Vec<ParamBlock>;

    /// Writes constrained values back, in the order of `param_blocks`.
    fn set_param_blocks(&mut self, values: &[DMatrix<f64>]) -> Result<()>;

    /// Builds the bound for one batch. `params` holds one node per block.
    /// `seed` drives any sampling inside the bound.
    fn bound_graph<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        scale: f64,
        seed: u64,
    ) -> Result<Var<'t>>;

    /// Latent predictive means and variances (noise excluded).
    fn predict_latent(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)>;

    fn noise_variance(&self) -> f64;

    fn input_dim(&self) -> usize;

    fn param_vector(&self) -> Result<ParamVector> {
        ParamVector::pack(&self.param_blocks())
    }

    fn load_param_vector(&mut self, p: &ParamVector) -> Result<()> {
        self.set_param_blocks(&p.unpack())
    }

    /// Bound value at the current parameters.
    fn bound_value(&self, x: &DMatrix<f64>, y: &DVector<f64>, scale: f64, seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let params: Vec<_> = self
            .param_blocks()
            .into_iter()
            .map(|b| tape.constant(b.value))
            .collect();
        Ok(self.bound_graph(&tape, &params, x, y, scale, seed)?.scalar_value())
    }
}
