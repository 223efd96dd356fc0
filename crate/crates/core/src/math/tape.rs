//! Per-pass gradient tape.
//!
//! Operations are evaluated eagerly and appended to the tape, so node order
//! is already a topological order. [`Tape::backward`] walks it in reverse.
//! A tape is built for one forward pass and dropped after its backward pass.

use std::collections::HashMap;

use super::matrix::{row_stats, softmax_in_place, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Gather(Var, Vec<usize>),
    Scatter {
        base: Var,
        indices: Vec<usize>,
        src: Var,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    SumAll(Var),
    Combine(Vec<(Var, f64)>),
    Flood(Var, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to the parameter registered under `id`.
    pub fn param(&self, id: usize) -> Option<&Matrix> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Moves parameter gradients out, keyed by parameter id.
    pub fn into_params(mut self) -> HashMap<usize, Matrix> {
        let mut out = HashMap::new();
        for (id, var) in std::mem::take(&mut self.params) {
            if let Some(g) = self.nodes[var.0].take() {
                out.insert(id, g);
            }
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a trainable parameter. Repeated calls with the same id
    /// return the same node.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds a `1 × cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(Error::shape("add_row", format!("bias shape {:?}", b.shape())));
        }
        let value = self.value(a).add_row_vector(b.data())?;
        let ng = self.ng(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let ng = self.ng(&[a]);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Row-wise layer norm with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let value = self.value(x).layer_norm(
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        )?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }, ng))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Gather(a, indices.to_vec()), ng))
    }

    /// `base` with rows `indices` replaced by the rows of `src`; all other
    /// rows pass through unchanged (and so does their gradient).
    pub fn scatter_rows(&mut self, base: Var, indices: &[usize], src: Var) -> Result<Var> {
        let value = self.value(base).scatter_rows(indices, self.value(src))?;
        let ng = self.ng(&[base, src]);
        Ok(self.push(
            value,
            Op::Scatter {
                base,
                indices: indices.to_vec(),
                src,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = self.ng(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Weighted token cross-entropy `Σ_n w_n · (−log softmax(logits_n)[y_n])`
    /// as a 1×1 value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.rows() || weights.len() != z.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "{} targets / {} weights for {} rows",
                    targets.len(),
                    weights.len(),
                    z.rows()
                ),
            ));
        }
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            if y >= z.cols() {
                return Err(Error::Input(format!("label {y} out of {} classes", z.cols())));
            }
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += w * (lse - row[y]);
            softmax_in_place(probs.row_mut(r));
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    /// `Σ c_i · x_i` over same-shaped values.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Usage("combine of zero terms".into()));
        };
        let (r, c) = self.value(first).shape();
        let mut acc = Matrix::zeros(r, c);
        for &(v, coef) in terms {
            acc.add_assign(&self.value(v).scale(coef))?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        Ok(self.push(acc, Op::Combine(terms.to_vec()), ng))
    }

    /// Flooding transform `|x − b| + b` of a scalar.
    pub fn flood(&mut self, a: Var, level: f64) -> Result<Var> {
        let x = self
            .value(a)
            .as_scalar()
            .ok_or_else(|| Error::Usage("flooding applies to scalar losses".into()))?;
        let ng = self.ng(&[a]);
        Ok(self.push(Matrix::scalar((x - level).abs() + level), Op::Flood(a, level), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let acc = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    acc(*a, g.matmul_nt(val(*b))?, grads)?;
                }
                if ng(*b) {
                    acc(*b, val(*a).matmul_tn(g)?, grads)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if ng(*a) {
                    acc(*a, g.matmul(val(*b))?, grads)?;
                }
                if ng(*b) {
                    acc(*b, g.matmul_tn(val(*a))?, grads)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.clone(), grads)?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.scale(-1.0), grads)?;
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(*a, g.hadamard(val(*b))?, grads)?;
                }
                if ng(*b) {
                    acc(*b, g.hadamard(val(*a))?, grads)?;
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone(), grads)?;
                if ng(*bias) {
                    acc(*bias, g.sum_rows(), grads)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s), grads)?,
            Op::Gelu(a) => {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= gelu_grad(*xv);
                }
                acc(*a, d, grads)?;
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let mut d = g.clone();
                for r in 0..s.rows() {
                    let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                    for (dv, sv) in d.row_mut(r).iter_mut().zip(s.row(r)) {
                        *dv = sv * (*dv - dot);
                    }
                }
                acc(*a, d, grads)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xm = val(*x);
                let gv = val(*gain).data();
                let cols = xm.cols();
                let n = cols as f64;
                let mut dx = Matrix::zeros(xm.rows(), cols);
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..xm.rows() {
                    let row = xm.row(r);
                    let (mean, inv) = row_stats(row, *eps);
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * inv;
                        dxhat[c] = gr[c] * gv[c];
                        dgain[c] += gr[c] * xhat[c];
                        dbias[c] += gr[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                        *out = inv * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                acc(*x, dx, grads)?;
                acc(*gain, Matrix::row_vector(dgain), grads)?;
                acc(*bias, Matrix::row_vector(dbias), grads)?;
            }
            Op::Gather(a, indices) => {
                let (rows, cols) = val(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                for (i, &src) in indices.iter().enumerate() {
                    for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                        *dv += gv;
                    }
                }
                acc(*a, d, grads)?;
            }
            Op::Scatter { base, indices, src } => {
                if ng(*base) {
                    let mut d = g.clone();
                    for &i in indices {
                        d.row_mut(i).fill(0.0);
                    }
                    acc(*base, d, grads)?;
                }
                if ng(*src) {
                    acc(*src, g.gather_rows(indices)?, grads)?;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = val(*a).shape();
                let mut d = Matrix::zeros(rows, cols);
                let len = g.cols();
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                acc(*a, d, grads)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).cols();
                    if ng(*p) {
                        acc(*p, g.slice_cols(start, len)?, grads)?;
                    }
                    start += len;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.data()[0];
                let mut d = probs.clone();
                for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = d.row_mut(r);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * scale;
                    }
                }
                acc(*logits, d, grads)?;
            }
            Op::SumAll(a) => {
                let (rows, cols) = val(*a).shape();
                acc(*a, Matrix::filled(rows, cols, g.data()[0]), grads)?;
            }
            Op::Combine(terms) => {
                for &(v, coef) in terms {
                    acc(v, g.scale(coef), grads)?;
                }
            }
            Op::Flood(a, level) => {
                let x = val(*a).data()[0];
                let sign = if x > *level {
                    1.0
                } else if x < *level {
                    -1.0
                } else {
                    0.0
                };
                acc(*a, g.scale(sign), grads)?;
            }
        }
        Ok(())
    }
}
