//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, appends a node, and returns a [`Var`] handle. [`Graph::backward`]
//! walks the nodes in reverse and returns a [`Gradients`] table.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `m×n + 1×n`, the row broadcast to every row.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogClamp(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamSet>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl Graph<'static> {
    /// A graph with no parameter bundle attached, in eval mode.
    pub fn detached() -> Self {
        Graph::build(None, Mode::Eval, 0)
    }

    pub fn detached_with_mode(mode: Mode, seed: u64) -> Self {
        Graph::build(None, mode, seed)
    }
}

impl<'p> Graph<'p> {
    pub fn eval(params: &'p ParamSet) -> Self {
        Graph::build(Some(params), Mode::Eval, 0)
    }

    /// Train-mode graph; dropout masks are drawn from a generator seeded by `seed`.
    pub fn train(params: &'p ParamSet, seed: u64) -> Self {
        Graph::build(Some(params), Mode::Train, seed)
    }

    pub fn with_mode(params: &'p ParamSet, mode: Mode, seed: u64) -> Self {
        Graph::build(Some(params), mode, seed)
    }

    fn build(params: Option<&'p ParamSet>, mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            params,
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf; its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a parameter. Repeated calls return the same node, so a
    /// parameter reused at several sites accumulates a single gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self
            .params
            .expect("Graph::param called on a graph without a parameter set")
            .get(id);
        let value = p.value.clone();
        let trainable = p.trainable;
        let v = self.push(value, Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(a);
        self.push(out, Op::LogClamp(a, floor), rg)
    }

    /// Per-row standardization followed by the affine `gain`/`bias` (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.rows() != 1 || tp.cols() != n {
                return Err(Error::dim("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(tx.len());
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.iter_rows() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout in train mode, identity in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// ReLU followed by dropout.
    pub fn relu_dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        let r = self.relu(a);
        self.dropout(r, rate)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::dim(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.rows() {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let c = t.cols();
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.cols() {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let data = t
            .iter_rows()
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::matrix(t.rows(), len, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Sum of all elements, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_param = HashMap::new();
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &grads[v.0] {
                let shape = self.value(v).shape().to_vec();
                by_param.insert(id, Tensor::new(shape, g.clone())?);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            by_param,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).unwrap();
                if self.rg(*a) {
                    acc(*a, gt.matmul(&tb.transpose()).unwrap().into_data());
                }
                if self.rg(*b) {
                    acc(*b, ta.transpose().matmul(&gt).unwrap().into_data());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                let n = out.cols();
                let mut gr = vec![0.0; n];
                for (i, &v) in g.iter().enumerate() {
                    gr[i % n] += v;
                }
                acc(*row, gr);
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Softmax(a) => {
                let n = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((y, gr), d) in out.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogClamp(a, floor) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..out.rows() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let k = inv_std[r] / n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[r * n + j] = k * (n as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Dropout(a, mask) => acc(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    acc(p, gp);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut ga = vec![0.0; src.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (c, len) = (src.cols(), out.cols());
                let mut ga = vec![0.0; src.len()];
                for r in 0..src.rows() {
                    ga[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*a, ga);
            }
            Op::Transpose(a) => {
                let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).unwrap();
                acc(*a, gt.transpose().into_data());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).unwrap(),
            None => {
                let n = shape.iter().product();
                Tensor::new(shape, vec![0.0; n]).unwrap()
            }
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Adds these gradients into `params`. Parameters that took no part in the
    /// forward pass receive an explicit zero gradient.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id);
            let contrib = self.by_param.get(&id);
            match (&mut p.grad, contrib) {
                (Some(existing), Some(c)) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(c.data()) {
                        *e += v;
                    }
                }
                (None, Some(c)) => p.grad = Some(c.clone()),
                (None, None) => p.grad = Some(Tensor::new(p.value.shape().to_vec(), vec![0.0; p.value.len()]).unwrap()),
                (Some(_), None) => {}
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let n = t.cols();
    let mut data = Vec::with_capacity(t.len());
    for row in t.iter_rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            data.push(e);
        }
        for v in &mut data[start..start + n] {
            *v /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}
