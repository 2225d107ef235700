//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every forward operation executes eagerly, records itself on the [`Tape`],
//! and checks its output for non-finite values. `backward` walks the tape in
//! reverse insertion order, which is a valid topological order because an
//! operation can only reference earlier nodes.
//!
//! The tape is rebuilt per forward pass and confined to one thread. Model
//! parameters live outside the tape in a [`ParamSet`]; binding a parameter
//! copies its current value into a leaf node exactly once per tape, so reuse
//! across timesteps accumulates gradients correctly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Smallest sigmoid output; outputs are clamped a hair inside (0,1) so logs
/// and gate invariants stay finite for any finite input.
const SIGMOID_FLOOR: f64 = f64::MIN_POSITIVE;
const SIGMOID_CEIL: f64 = 1.0 - 2.2204460492503131e-16 / 2.0;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    MatVec { w: Var, x: Var },
    VecMat { x: Var, m: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulScalar { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    Concat { parts: Vec<Var> },
    Stack { rows: Vec<Var> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Softmax { x: Var },
    Dropout { x: Var, keep: f64, mask: Vec<bool> },
    Mean { x: Var },
    Sum { x: Var },
    Abs { x: Var },
    Square { x: Var },
    Ln { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    RowsMean { m: Var, indices: Vec<usize> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatVec { .. } => "matvec",
            Op::VecMat { .. } => "vecmat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "elementwise_mul",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Stack { .. } => "stack",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Softmax { .. } => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Ln { .. } => "ln",
            Op::Clamp { .. } => "clamp",
            Op::RowsMean { .. } => "rows_mean",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    bound: BTreeMap<ParamId, Var>,
    backward_done: bool,
    grad_fault: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Corrupt the backward rule of the named op (gradient-check fault
    /// injection fixture; never used in training).
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.grad_fault = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor, requires: bool, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        value.requires_grad = requires;
        value.grad = None;
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// Record a constant with no gradient path.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.leaf(Tensor::scalar(value))
    }

    /// Bind a parameter as a leaf. Repeated binds of the same parameter
    /// return the original node so gradient contributions accumulate.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let t = params.get(id);
        let v = self.push(
            Tensor {
                shape: t.shape.clone(),
                data: t.data.clone(),
                requires_grad: false,
                grad: None,
            },
            true,
            Op::Param(id),
        )?;
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        Ok(v)
    }

    // -- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.0].value.dims2();
        let (k2, n) = self.nodes[b.0].value.dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(vec![m, n], out)?, req, Op::MatMul { a, b })
    }

    /// `W[m,n] * x[n] -> [m]`
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.nodes[w.0].value.dims2();
        let xv = &self.nodes[x.0].value;
        if xv.shape.len() != 1 || xv.data.len() != n {
            return Err(Error::shape(
                "matvec",
                format!("matrix [{},{}] vs vector len {}", m, n, xv.data.len()),
            ));
        }
        let wv = &self.nodes[w.0].value.data;
        let xd = &xv.data;
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            *o = row.iter().zip(xd).map(|(a, b)| a * b).sum();
        }
        let req = self.requires(w) || self.requires(x);
        self.push(Tensor::vector(out), req, Op::MatVec { w, x })
    }

    /// `x[n] * M[n,d] -> [d]` (row-vector times matrix).
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, d) = self.nodes[m.0].value.dims2();
        let xv = &self.nodes[x.0].value;
        if xv.shape.len() != 1 || xv.data.len() != n {
            return Err(Error::shape(
                "vecmat",
                format!("vector len {} vs matrix [{},{}]", xv.data.len(), n, d),
            ));
        }
        let md = &self.nodes[m.0].value.data;
        let xd = &xv.data;
        let mut out = vec![0.0; d];
        for i in 0..n {
            let xi = xd[i];
            let row = &md[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] += xi * row[j];
            }
        }
        let req = self.requires(x) || self.requires(m);
        self.push(Tensor::vector(out), req, Op::VecMat { x, m })
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].value.shape != self.nodes[b.0].value.shape {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].value.shape, self.nodes[b.0].value.shape
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(shape, out)?, req, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(shape, out)?, req, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("elementwise_mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape.clone();
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(shape, out)?, req, Op::Mul { a, b })
    }

    /// Multiply every element of `x` by a scalar tape value `s` (shape `[1]`).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::shape("mul_scalar", "scale must be a scalar"));
        }
        let sv = self.nodes[s.0].value.data[0];
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * sv).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x) || self.requires(s);
        self.push(Tensor::new(shape, out)?, req, Op::MulScalar { x, s })
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Scale { x, c })
    }

    /// Concatenate 1-D vectors along their only axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut out = Vec::new();
        let mut req = false;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 1 {
                return Err(Error::shape("concat", "inputs must be 1-D"));
            }
            out.extend_from_slice(&t.data);
            req |= t.requires_grad;
        }
        self.push(
            Tensor::vector(out),
            req,
            Op::Concat { parts: parts.to_vec() },
        )
    }

    /// Stack equal-length 1-D vectors into an `[n, d]` matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack", "no inputs"));
        }
        let d = self.nodes[rows[0].0].value.data.len();
        let mut out = Vec::with_capacity(rows.len() * d);
        let mut req = false;
        for r in rows {
            let t = &self.nodes[r.0].value;
            if t.shape.len() != 1 || t.data.len() != d {
                return Err(Error::shape("stack", "rows must be 1-D and equal length"));
            }
            out.extend_from_slice(&t.data);
            req |= t.requires_grad;
        }
        self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            req,
            Op::Stack { rows: rows.to_vec() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_FLOOR, SIGMOID_CEIL))
            .collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|v| if *v > 0.0 { *v } else { slope * v })
            .collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::LeakyRelu { x, slope })
    }

    /// Numerically stable softmax; row-wise on matrices, whole vector on 1-D.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (rows, cols) = t.dims2();
        if cols == 0 {
            return Err(Error::shape("softmax", "empty input"));
        }
        let mut out = vec![0.0; t.data.len()];
        for r in 0..rows {
            let row = &t.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let shape = t.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Softmax { x })
    }

    /// Inverted dropout: scales kept activations by `1/keep` at train time so
    /// evaluation needs no op at all. Callers skip this entirely in eval mode.
    pub fn dropout(&mut self, x: Var, keep: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0 < keep && keep <= 1.0) {
            return Err(Error::contract(format!(
                "dropout keep probability must be in (0,1], got {keep}"
            )));
        }
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < keep).collect();
        self.dropout_with_mask(x, keep, mask)
    }

    pub(crate) fn dropout_with_mask(&mut self, x: Var, keep: f64, mask: Vec<bool>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if mask.len() != t.numel() {
            return Err(Error::shape("dropout", "mask length mismatch"));
        }
        let out: Vec<f64> = t
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| if *m { v / keep } else { 0.0 })
            .collect();
        let shape = t.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Dropout { x, keep, mask })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = t.data.iter().sum::<f64>() / t.numel() as f64;
        let req = self.requires(x);
        self.push(Tensor::scalar(m), req, Op::Mean { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data.iter().sum::<f64>();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), req, Op::Sum { x })
    }

    /// Elementwise |x| with subgradient 0 at exact ties.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Abs { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * v).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Square { x })
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Ln { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let shape = self.nodes[x.0].value.shape.clone();
        let req = self.requires(x);
        self.push(Tensor::new(shape, out)?, req, Op::Clamp { x, lo, hi })
    }

    /// Mean of selected matrix rows; repeated indices contribute repeatedly.
    pub fn rows_mean(&mut self, m: Var, indices: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[m.0].value;
        if t.shape.len() != 2 {
            return Err(Error::shape("rows_mean", "input must be a matrix"));
        }
        if indices.is_empty() {
            return Err(Error::shape("rows_mean", "no row indices"));
        }
        let (rows, cols) = t.dims2();
        let mut out = vec![0.0; cols];
        for &idx in &indices {
            if idx >= rows {
                return Err(Error::shape(
                    "rows_mean",
                    format!("row index {idx} out of {rows}"),
                ));
            }
            let row = &t.data[idx * cols..(idx + 1) * cols];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = indices.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let req = self.requires(m);
        self.push(Tensor::vector(out), req, Op::RowsMean { m, indices })
    }

    /// Fixed-weight reduction to a scalar: `sum_i w_i * x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if weights.len() != t.numel() {
            return Err(Error::shape("weighted_sum", "weight length mismatch"));
        }
        let s: f64 = t.data.iter().zip(&weights).map(|(a, w)| a * w).sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), req, Op::WeightedSum { x, weights })
    }

    // -- convenience compositions -------------------------------------------

    /// `W x + b`
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// `sum(a * b)` for equal-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // -- backward ------------------------------------------------------------

    /// Populate gradients of every reachable `requires_grad` node from a
    /// scalar loss. Non-participating parameters simply keep zero grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::NonScalarBackward { shape: lt.shape.clone() });
        }
        self.backward_done = true;
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(out_grad) = self.nodes[i].value.grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            let faulted = self.grad_fault == Some(op.name());
            self.apply_rule(i, &op, &out_grad, faulted);
        }
        Ok(())
    }

    fn add_to_grad(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let grad = self.nodes[v.0]
            .value
            .grad
            .get_or_insert_with(|| vec![0.0; n]);
        for (j, g) in grad.iter_mut().enumerate() {
            *g += f(j);
        }
    }

    fn corrupt_grad(&mut self, v: Var) {
        if let Some(g) = self.nodes[v.0].value.grad.as_mut() {
            g.iter_mut().for_each(|x| *x += 0.5);
        }
    }

    fn apply_rule(&mut self, node: usize, op: &Op, dy: &[f64], faulted: bool) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let (_, n) = self.nodes[b.0].value.dims2();
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                self.add_to_grad(*a, |idx| {
                    let (i, p) = (idx / k, idx % k);
                    (0..n).map(|j| dy[i * n + j] * bv[p * n + j]).sum()
                });
                self.add_to_grad(*b, |idx| {
                    let (p, j) = (idx / n, idx % n);
                    (0..m).map(|i| av[i * k + p] * dy[i * n + j]).sum()
                });
                if faulted {
                    self.corrupt_grad(*a);
                    self.corrupt_grad(*b);
                }
            }
            Op::MatVec { w, x } => {
                let (_, n) = self.nodes[w.0].value.dims2();
                let wv = self.nodes[w.0].value.data.clone();
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*w, |idx| dy[idx / n] * xv[idx % n]);
                self.add_to_grad(*x, |j| {
                    dy.iter().enumerate().map(|(i, d)| d * wv[i * n + j]).sum()
                });
                if faulted {
                    self.corrupt_grad(*w);
                    self.corrupt_grad(*x);
                }
            }
            Op::VecMat { x, m } => {
                let (n, d) = self.nodes[m.0].value.dims2();
                let _ = n;
                let mv = self.nodes[m.0].value.data.clone();
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*x, |i| (0..d).map(|j| mv[i * d + j] * dy[j]).sum());
                self.add_to_grad(*m, |idx| xv[idx / d] * dy[idx % d]);
                if faulted {
                    self.corrupt_grad(*x);
                    self.corrupt_grad(*m);
                }
            }
            Op::Add { a, b } => {
                self.add_to_grad(*a, |j| dy[j]);
                self.add_to_grad(*b, |j| dy[j]);
                if faulted {
                    self.corrupt_grad(*a);
                    self.corrupt_grad(*b);
                }
            }
            Op::Sub { a, b } => {
                self.add_to_grad(*a, |j| dy[j]);
                self.add_to_grad(*b, |j| -dy[j]);
                if faulted {
                    self.corrupt_grad(*a);
                    self.corrupt_grad(*b);
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                self.add_to_grad(*a, |j| bv[j] * dy[j]);
                self.add_to_grad(*b, |j| av[j] * dy[j]);
                if faulted {
                    self.corrupt_grad(*a);
                    self.corrupt_grad(*b);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.nodes[s.0].value.data[0];
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*x, |j| sv * dy[j]);
                self.add_to_grad(*s, |_| xv.iter().zip(dy).map(|(a, d)| a * d).sum());
                if faulted {
                    self.corrupt_grad(*x);
                    self.corrupt_grad(*s);
                }
            }
            Op::Scale { x, c } => {
                self.add_to_grad(*x, |j| c * dy[j]);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts.clone() {
                    let len = self.nodes[p.0].value.numel();
                    let o = offset;
                    self.add_to_grad(p, |j| dy[o + j]);
                    if faulted {
                        self.corrupt_grad(p);
                    }
                    offset += len;
                }
            }
            Op::Stack { rows } => {
                let d = self.nodes[rows[0].0].value.numel();
                for (r, row) in rows.clone().into_iter().enumerate() {
                    self.add_to_grad(row, |j| dy[r * d + j]);
                    if faulted {
                        self.corrupt_grad(row);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[node].value.data.clone();
                self.add_to_grad(*x, |j| yv[j] * (1.0 - yv[j]) * dy[j]);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Tanh { x } => {
                let yv = self.nodes[node].value.data.clone();
                self.add_to_grad(*x, |j| (1.0 - yv[j] * yv[j]) * dy[j]);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*x, |j| if xv[j] > 0.0 { dy[j] } else { 0.0 });
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.nodes[x.0].value.data.clone();
                let slope = *slope;
                self.add_to_grad(*x, |j| if xv[j] > 0.0 { dy[j] } else { slope * dy[j] });
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Softmax { x } => {
                let yv = self.nodes[node].value.data.clone();
                let (rows, cols) = self.nodes[node].value.dims2();
                let mut dx = vec![0.0; yv.len()];
                for r in 0..rows {
                    let y = &yv[r * cols..(r + 1) * cols];
                    let g = &dy[r * cols..(r + 1) * cols];
                    let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = y[j] * (g[j] - inner);
                    }
                }
                self.add_to_grad(*x, |j| dx[j]);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Dropout { x, keep, mask } => {
                let keep = *keep;
                let mask = mask.clone();
                self.add_to_grad(*x, |j| if mask[j] { dy[j] / keep } else { 0.0 });
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel() as f64;
                let g = dy[0] / n;
                self.add_to_grad(*x, |_| g);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Sum { x } => {
                let g = dy[0];
                self.add_to_grad(*x, |_| g);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Abs { x } => {
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*x, |j| {
                    if xv[j] > 0.0 {
                        dy[j]
                    } else if xv[j] < 0.0 {
                        -dy[j]
                    } else {
                        0.0
                    }
                });
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Square { x } => {
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*x, |j| 2.0 * xv[j] * dy[j]);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Ln { x } => {
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*x, |j| dy[j] / xv[j]);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let xv = self.nodes[x.0].value.data.clone();
                self.add_to_grad(*x, |j| if xv[j] >= lo && xv[j] <= hi { dy[j] } else { 0.0 });
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
            Op::RowsMean { m, indices } => {
                let cols = self.nodes[node].value.numel();
                let n = indices.len() as f64;
                let mut scatter: BTreeMap<usize, f64> = BTreeMap::new();
                for &idx in indices {
                    *scatter.entry(idx).or_insert(0.0) += 1.0;
                }
                let scatter = scatter;
                self.add_to_grad(*m, |flat| {
                    let (row, col) = (flat / cols, flat % cols);
                    scatter.get(&row).map_or(0.0, |count| count * dy[col] / n)
                });
                if faulted {
                    self.corrupt_grad(*m);
                }
            }
            Op::WeightedSum { x, weights } => {
                let weights = weights.clone();
                let g = dy[0];
                self.add_to_grad(*x, |j| weights[j] * g);
                if faulted {
                    self.corrupt_grad(*x);
                }
            }
        }
    }

    /// Add the gradients of every bound parameter into its entry in the set.
    /// Accumulation is additive; callers zero grads between batches.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) -> Result<()> {
        for (pid, var) in &self.bindings {
            if let Some(g) = self.nodes[var.0].value.grad.as_ref() {
                let t = params.get_mut(*pid);
                let name = t.shape.clone();
                let Some(dst) = t.grad.as_mut() else {
                    return Err(Error::MissingGradient { name: format!("{name:?}") });
                };
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn param_of(params: &mut ParamSet, name: &str, t: Tensor) -> ParamId {
        params.add(name, t)
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1e6, -50.0, 0.0, 50.0, 1e6])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        for v in tape.value(y) {
            assert!(*v > 0.0 && *v < 1.0, "sigmoid output {v} escaped (0,1)");
        }
    }

    #[test]
    fn concat_along_last_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.leaf(Tensor::vector(vec![3.0])).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_and_leaky_relu_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-2.5)).unwrap();
        let r = tape.relu(x).unwrap();
        let l = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.scalar_value(r), 0.0);
        assert_eq!(tape.scalar_value(l), -0.5);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // loss = sum(x * x), x = [1,2,3] -> grad = [2,4,6]
        let mut params = ParamSet::new();
        let xid = param_of(&mut params, "x", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, xid).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        assert_eq!(params.get(xid).grad.as_ref().unwrap(), &vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut params = ParamSet::new();
        let xid = param_of(&mut params, "x", Tensor::vector(vec![1.0]));
        let qid = param_of(&mut params, "q", Tensor::vector(vec![5.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, xid).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        assert_eq!(params.get(qid).grad.as_ref().unwrap(), &vec![0.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarBackward { .. })
        ));
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut params = ParamSet::new();
        let xid = param_of(&mut params, "x", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let x = tape.param(&params, xid).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::DoubleBackward)));
    }

    #[test]
    fn shared_parameter_accumulates_across_uses() {
        // loss = sum(x) + sum(x) -> grad = 2 per element
        let mut params = ParamSet::new();
        let xid = param_of(&mut params, "x", Tensor::vector(vec![1.0, 1.0]));
        let mut tape = Tape::new();
        let x1 = tape.param(&params, xid).unwrap();
        let x2 = tape.param(&params, xid).unwrap();
        assert_eq!(x1, x2);
        let s1 = tape.sum(x1).unwrap();
        let s2 = tape.sum(x2).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        assert_eq!(params.get(xid).grad.as_ref().unwrap(), &vec![2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, 10.0]).unwrap())
            .unwrap();
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let s: f64 = v[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0)).unwrap();
        let err = tape.ln(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "ln" }));
    }

    #[test]
    fn dropout_eval_identity_is_caller_side() {
        // Train-mode mask of all-keep divides by keep; mask drawn per element.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = tape.dropout_with_mask(x, 0.5, vec![true, false]).unwrap();
        assert_eq!(tape.value(y), &[2.0, 0.0]);
    }

    #[test]
    fn tape_is_deterministic_for_fixed_seed() {
        let run = || {
            let mut params = ParamSet::new();
            let xid = params.add("x", Tensor::vector(vec![0.3, -0.7, 1.1]));
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.param(&params, xid).unwrap();
            let d = tape.dropout(x, 0.7, &mut rng).unwrap();
            let t = tape.tanh(d).unwrap();
            let loss = tape.mean(t).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut params).unwrap();
            (
                tape.scalar_value(loss).to_bits(),
                params.get(xid).grad.clone().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
