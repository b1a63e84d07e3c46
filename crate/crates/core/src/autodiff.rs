//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node that
//! owns its output value and remembers its operands; [`Tape::backward`] walks
//! the nodes in reverse, accumulating vector-Jacobian products. Parameters are
//! borrowed from a [`ParameterStore`] instead of being copied onto the tape.
//!
//! Tensors are viewed as matrices (`rows x cols`, last extent = cols) by the
//! row-wise operations: layer norm, softmax, bias broadcast and column slicing.

use std::sync::Arc;

use crate::error::{BotError, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gather index that yields 0 instead of reading the source.
pub const GATHER_ZERO: u32 = u32::MAX;

enum Op {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow { a: Var, row: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Gelu { a: Var, th: Vec<f64> },
    Softplus(Var),
    Exp(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Square(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { a: Var, index: Arc<[u32]> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

struct Slots<'g> {
    nodes: Vec<Option<Tensor>>,
    params: Option<&'g mut [Tensor]>,
}

pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node created by [`Tape::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Parameters reached by the backward pass, with their gradients.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }

    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for (id, g) in self.params() {
            store.accumulate_grad(id, g);
        }
    }
}

fn shape_err(msg: String) -> BotError {
    BotError::Shape(msg)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (k2, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        if k != k2 {
            return Err(shape_err(format!(
                "matmul {:?}{} x {:?}{}",
                av.shape(),
                if ta { "ᵀ" } else { "" },
                bv.shape(),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(1.0, av, ta, bv, tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let c = av.cols();
        if rv.len() != c {
            return Err(shape_err(format!(
                "add_row: {:?} + row {:?}",
                av.shape(),
                rv.shape()
            )));
        }
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow { a, row }, rg))
    }

    /// Per-row normalisation over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            let o = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                o[j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = fast_exp(*v - m);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let th: Vec<f64> = x.data().iter().map(|&v| gelu_tanh(v)).collect();
        let out = Tensor::new(x.shape(), x.data().iter().zip(&th).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu { a, th }, rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp { a, lo, hi }, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if len == 0 || start + len > c {
            return Err(shape_err(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                av.shape()
            )));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * c + start..r * c + start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_cols of nothing".into()))?;
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let c = pv.cols();
                data.extend_from_slice(&pv.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `out[i] = a[index[i]]`, or zero where the index is `None`.
    pub fn gather(&mut self, a: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        if index
            .iter()
            .any(|&i| i != GATHER_ZERO && i as usize >= av.len())
        {
            return Err(shape_err("gather index out of range".into()));
        }
        let src = av.data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gather { a, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::full(&[1], self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::full(&[1], av.sum() / av.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut slots = Slots { nodes: Vec::new(), params: None };
        self.run_backward(loss, &mut slots)?;
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .filter(|(_, v)| v.0 <= loss.0)
            .collect();
        Ok(Gradients {
            nodes: slots.nodes,
            params,
        })
    }

    /// Reverse pass that adds parameter gradients straight into `into`,
    /// indexed like the parameter store.
    pub fn backward_accumulate(&self, loss: Var, into: &mut [Tensor]) -> Result<()> {
        if into.len() != self.params.len() {
            return Err(shape_err(format!(
                "{} gradient buffers for {} parameters",
                into.len(),
                self.params.len()
            )));
        }
        let mut slots = Slots { nodes: Vec::new(), params: Some(into) };
        self.run_backward(loss, &mut slots)
    }

    fn run_backward(&self, loss: Var, slots: &mut Slots) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar, got {:?}",
                lv.shape()
            )));
        }
        slots.nodes.resize_with(loss.0 + 1, || None);
        slots.nodes[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = slots.nodes[i].take() else { continue };
            self.backprop_node(i, &g, slots);
            slots.nodes[i] = Some(g);
        }
        Ok(())
    }

    fn grad_slot<'g>(&self, slots: &'g mut Slots, v: Var) -> Option<&'g mut Tensor> {
        if !self.rg(v) {
            return None;
        }
        if let (Op::Param(id), Some(ext)) = (&self.nodes[v.0].op, slots.params.as_deref_mut()) {
            return Some(&mut ext[id.0]);
        }
        let shape = self.value(v).shape();
        Some(slots.nodes[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn acc(&self, slots: &mut Slots, v: Var, f: impl Fn(usize) -> f64) {
        if let Some(slot) = self.grad_slot(slots, v) {
            for (i, s) in slot.data_mut().iter_mut().enumerate() {
                *s += f(i);
            }
        }
    }

    /// `grad(v) += g`, moving a copy in when `v` has no gradient yet.
    fn acc_copy(&self, slots: &mut Slots, v: Var, g: &Tensor) {
        if !self.rg(v) {
            return;
        }
        let external = matches!(self.nodes[v.0].op, Op::Param(_)) && slots.params.is_some();
        if !external && slots.nodes[v.0].is_none() {
            let shape = self.value(v).shape();
            let mut c = g.clone();
            if c.shape() != shape {
                c = c.reshape(shape).expect("gradient reshape");
            }
            slots.nodes[v.0] = Some(c);
            return;
        }
        let slot = self.grad_slot(slots, v).expect("grad slot");
        for (s, x) in slot.data_mut().iter_mut().zip(g.data()) {
            *s += x;
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut Slots) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    if ta {
                        // A is stored k x m: dA = op(B) · dCᵀ
                        gemm(1.0, bv, tb, g, true, 1.0, ga);
                    } else {
                        gemm(1.0, g, false, bv, !tb, 1.0, ga);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    if tb {
                        // B is stored n x k: dB = dCᵀ · op(A)
                        gemm(1.0, g, true, av, ta, 1.0, gb);
                    } else {
                        gemm(1.0, av, !ta, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_copy(grads, *a, g);
                self.acc_copy(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_copy(grads, *a, g);
                self.acc(grads, *b, |k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |k| gd[k] * bv[k]);
                self.acc(grads, *b, |k| gd[k] * av[k]);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, |k| gd[k] * s);
            }
            Op::AddRow { a, row } => {
                self.acc_copy(grads, *a, g);
                let c = self.value(*row).len();
                if let Some(gr) = self.grad_slot(grads, *row) {
                    for chunk in gd.chunks(c) {
                        for (r, v) in gr.data_mut().iter_mut().zip(chunk) {
                            *r += v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for chunk in gd.chunks(d) {
                        for (r, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *r += v;
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (chunk, h) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg.data_mut()[j] += chunk[j] * h[j];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let n = d as f64;
                    for (r, (chunk, h)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = chunk[j] * gam[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        let inv = inv_std[r];
                        let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = chunk[j] * gam[j];
                            out[j] += inv / n * (n * dh - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                let c = y.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((out, yr), gr) in ga
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gd.chunks(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu { a, th } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |k| gd[k] * gelu_grad(x[k], th[k]));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |k| gd[k] * sigmoid(x[k]));
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.as_ref().expect("exp value").data();
                self.acc(grads, *a, |k| gd[k] * y[k]);
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let (lo, hi) = (*lo, *hi);
                self.acc(grads, *a, |k| {
                    if x[k] >= lo && x[k] <= hi {
                        gd[k]
                    } else {
                        0.0
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |k| 2.0 * x[k] * gd[k]);
            }
            Op::SliceCols { a, start } => {
                let c = self.value(*a).cols();
                let len = g.cols();
                let start = *start;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, chunk) in gd.chunks(len).enumerate() {
                        let dst = &mut ga.data_mut()[r * c + start..r * c + start + len];
                        for (d, s) in dst.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (r, dst) in gp.data_mut().chunks_mut(c).enumerate() {
                            let src = &gd[r * total + offset..r * total + offset + c];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let dst = ga.data_mut();
                    for (&j, &v) in index.iter().zip(gd) {
                        if j != GATHER_ZERO {
                            dst[j as usize] += v;
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc_copy(grads, *a, g),
            Op::Sum(a) => {
                let s = gd[0];
                self.acc(grads, *a, |_| s);
            }
            Op::Mean(a) => {
                let s = gd[0] / self.value(*a).len() as f64;
                self.acc(grads, *a, |_| s);
            }
        }
    }
}

/// Index value meaning "emit zero" in [`Tape::gather`].
pub const fn gather_zero() -> u32 {
    GATHER_ZERO
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `e^x` by range reduction to `|r| <= ln2/2` and a degree-13 Taylor
/// polynomial; agrees with libm to a few ulp and is several times faster.
pub fn fast_exp(x: f64) -> f64 {
    if !(-708.0..=709.0).contains(&x) {
        return x.exp();
    }
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // round to nearest without a libm call: 1.5 * 2^52 forces integer spacing
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let k = (x * std::f64::consts::LOG2_E + SHIFT) - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p: f64 = 1.0 / 6_227_020_800.0;
    for d in (1..13).rev() {
        p = p * r + INV_FACT[d];
    }
    p = p * r + 1.0;
    p * f64::from_bits(((k as i64 + 1023) as u64) << 52)
}

/// `1 / d!` for `d` in `0..13`.
const INV_FACT: [f64; 13] = {
    let mut t = [1.0; 13];
    let mut d = 1;
    while d < 13 {
        t[d] = t[d - 1] / d as f64;
        d += 1;
    }
    t
};

/// `tanh(u)` through one exponential.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / (fast_exp(2.0 * u) + 1.0)
}

fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + 0.044715 * x * x * x))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
