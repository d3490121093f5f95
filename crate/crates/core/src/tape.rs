//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! visits them in exact reverse topological order. Parameters and large
//! constants are borrowed rather than copied; the tape lives only as long as
//! the forward pass that built it.
//!
//! With recording disabled the tape still evaluates every op (the denoiser
//! has a single forward path for training and inference) but keeps no
//! backward bookkeeping.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Silu(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow { x: Var, start: usize },
    Repeat { x: Var, times: usize },
    Gather { table: Var, rows: Vec<usize> },
    MeanSquare(Var),
    Sum(Var),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients produced by [`GradTape::backward`], keyed by the id
/// given to [`GradTape::param`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `other` into `self` parameter by parameter.
    pub fn accumulate(&mut self, other: Gradients) -> Result<()> {
        for (k, g) in other.by_param {
            match self.by_param.get_mut(&k) {
                Some(acc) => add_assign(acc, &g)?,
                None => {
                    self.by_param.insert(k, g);
                }
            }
        }
        Ok(())
    }
}

pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
    params: Vec<(usize, Var)>,
}

impl<'a> GradTape<'a> {
    /// A tape that records backward information.
    pub fn recording() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            params: Vec::new(),
        }
    }

    /// A tape used only for evaluation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
            params: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Value<'a>, op: Op, needs_grad: bool) -> Var {
        let needs_grad = self.record && needs_grad;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable parameter under a caller-chosen id.
    pub fn param(&mut self, id: usize, value: &'a Tensor) -> Var {
        let v = self.push(Value::Borrowed(value), Op::Param(id), true);
        self.params.push((id, v));
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(Value::Owned(out), Op::MatMul { a, b, transpose_b: false }, g))
    }

    /// `a × bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(Value::Owned(out), Op::MatMul { a, b, transpose_b: true }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(Value::Owned(out), Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(Value::Owned(out), Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(Value::Owned(out), Op::Mul(a, b), g))
    }

    /// Adds a vector (shape `[d]`) to every row of `x` (last extent `d`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(row))?;
        let g = self.grad_of(x) || self.grad_of(row);
        Ok(self.push(Value::Owned(out), Op::AddRow(x, row), g))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let out = self.value(x).scale(s)?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Scale(x, s), g))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let last = self.value(x).rank() - 1;
        let out = self.value(x).softmax(last)?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Softmax(x), g))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", xv.shape(), self.value(gain).shape()));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0f32; xv.len()];
        for (row, dst) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, rstd) = row_stats(row);
            for j in 0..d {
                let xhat = ((row[j] as f64 - mean) * rstd) as f32;
                dst[j] = xhat * gv[j] + bv[j];
            }
        }
        tensor::ensure_finite("layer_norm", &out)?;
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let g = self.grad_of(x) || self.grad_of(gain) || self.grad_of(bias);
        Ok(self.push(Value::Owned(out), Op::LayerNorm { x, gain, bias }, g))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v))?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Silu(x), g))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Permute(x, perm.to_vec()), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Reshape(x), g))
    }

    /// Slice `start..start + len` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(start, len)?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Narrow { x, start }, g))
    }

    /// Tiles `x` along its leading axis.
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::range("repeat", "zero repetitions"));
        }
        let out = self.value(x).repeat_leading(times);
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Repeat { x, times }, g))
    }

    /// Rows of a `[vocab, d]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || rows.is_empty() {
            return Err(Error::shape("gather_rows", t.shape(), &[rows.len()]));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= vocab {
                return Err(Error::range("gather_rows", alloc::format!("row {r} of {vocab}")));
            }
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_parts(vec![rows.len(), d], data);
        let g = self.grad_of(table);
        Ok(self.push(Value::Owned(out), Op::Gather { table, rows: rows.to_vec() }, g))
    }

    /// Mean of squared elements, as a one-element tensor.
    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.data().iter().fold(0.0f64, |acc, &v| acc + (v as f64) * (v as f64));
        let out = Tensor::new(&[1], vec![(s / xv.len() as f64) as f32])?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::MeanSquare(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::new(&[1], vec![self.value(x).sum() as f32])?;
        let g = self.grad_of(x);
        Ok(self.push(Value::Owned(out), Op::Sum(x), g))
    }

    /// Gradients of a scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get an all-zero
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.record && self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        let mut by_param = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut by_param)?;
        }
        for &(id, v) in &self.params {
            by_param.entry(id).or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        }
        Ok(Gradients { by_param })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        by_param: &mut BTreeMap<usize, Tensor>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match by_param.get_mut(id) {
                Some(acc) => add_assign(acc, &g)?,
                None => {
                    by_param.insert(*id, g);
                }
            },
            &Op::MatMul { a, b, transpose_b } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.grad_of(a) {
                    let da = if transpose_b { g.matmul(bv)? } else { g.matmul_t(bv)? };
                    self.send(grads, a, da)?;
                }
                if self.grad_of(b) {
                    let db = matmul_rhs_grad(av, bv, &g, transpose_b)?;
                    self.send(grads, b, db)?;
                }
            }
            &Op::Add(a, b) => {
                if self.grad_of(a) {
                    self.send(grads, a, g.clone())?;
                }
                if self.grad_of(b) {
                    self.send(grads, b, g)?;
                }
            }
            &Op::Sub(a, b) => {
                if self.grad_of(a) {
                    self.send(grads, a, g.clone())?;
                }
                if self.grad_of(b) {
                    self.send(grads, b, g.scale(-1.0)?)?;
                }
            }
            &Op::Mul(a, b) => {
                if self.grad_of(a) {
                    self.send(grads, a, g.mul(self.value(b))?)?;
                }
                if self.grad_of(b) {
                    self.send(grads, b, g.mul(self.value(a))?)?;
                }
            }
            &Op::AddRow(x, row) => {
                if self.grad_of(row) {
                    let d = self.value(row).len();
                    let mut acc = vec![0.0f32; d];
                    for chunk in g.data().chunks_exact(d) {
                        for (s, &v) in acc.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                    let shape = self.value(row).shape().to_vec();
                    self.send(grads, row, Tensor::from_parts(shape, acc))?;
                }
                if self.grad_of(x) {
                    self.send(grads, x, g)?;
                }
            }
            &Op::Scale(x, s) => self.send(grads, x, g.scale(s)?)?,
            &Op::Softmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks_exact(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let dot = yr.iter().zip(gr).fold(0.0f64, |a, (&p, &q)| a + (p as f64) * (q as f64));
                    for j in 0..d {
                        dr[j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                self.send(grads, x, Tensor::from_parts(y.shape().to_vec(), dx))?;
            }
            &Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(x);
                let gv = self.value(gain).data();
                let d = gv.len();
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgain = vec![0.0f32; d];
                let mut dbias = vec![0.0f32; d];
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for ((row, gr), dr) in xv
                    .data()
                    .chunks_exact(d)
                    .zip(g.data().chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let (mean, rstd) = row_stats(row);
                    let (mut m1, mut m2) = (0.0f64, 0.0f64);
                    for j in 0..d {
                        xhat[j] = (row[j] as f64 - mean) * rstd;
                        dxhat[j] = gr[j] as f64 * gv[j] as f64;
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                        dgain[j] += (gr[j] as f64 * xhat[j]) as f32;
                        dbias[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dr[j] = (rstd * (dxhat[j] - m1 - xhat[j] * m2)) as f32;
                    }
                }
                if self.grad_of(x) {
                    self.send(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
                }
                if self.grad_of(gain) {
                    let s = self.value(gain).shape().to_vec();
                    self.send(grads, gain, Tensor::from_parts(s, dgain))?;
                }
                if self.grad_of(bias) {
                    let s = self.value(bias).shape().to_vec();
                    self.send(grads, bias, Tensor::from_parts(s, dbias))?;
                }
            }
            &Op::Silu(x) => {
                let dx = self.value(x).zip_map(&g, "silu_backward", |v, gv| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })?;
                self.send(grads, x, dx)?;
            }
            Op::Permute(x, perm) => {
                let dx = g.permute(&tensor::inverse_permutation(perm))?;
                self.send(grads, *x, dx)?;
            }
            &Op::Reshape(x) => {
                let dx = g.reshape(self.value(x).shape())?;
                self.send(grads, x, dx)?;
            }
            &Op::Narrow { x, start } => {
                let xs = self.value(x).shape();
                let inner = g.len() / g.shape()[0];
                let mut dx = Tensor::zeros(xs);
                dx.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.send(grads, x, dx)?;
            }
            &Op::Repeat { x, times } => {
                let xs = self.value(x).shape().to_vec();
                let n = self.value(x).len();
                let mut acc = vec![0.0f32; n];
                for t in 0..times {
                    for (a, &v) in acc.iter_mut().zip(&g.data()[t * n..(t + 1) * n]) {
                        *a += v;
                    }
                }
                self.send(grads, x, Tensor::from_parts(xs, acc))?;
            }
            Op::Gather { table, rows } => {
                let ts = self.value(*table).shape().to_vec();
                let d = ts[1];
                let mut dt = Tensor::zeros(&ts);
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dt.data_mut()[r * d..(r + 1) * d];
                    for (a, &v) in dst.iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                        *a += v;
                    }
                }
                self.send(grads, *table, dt)?;
            }
            &Op::MeanSquare(x) => {
                let n = self.value(x).len() as f32;
                let c = 2.0 * g.data()[0] / n;
                let dx = self.value(x).scale(c)?;
                self.send(grads, x, dx)?;
            }
            &Op::Sum(x) => {
                let dx = Tensor::full(self.value(x).shape(), g.data()[0]);
                self.send(grads, x, dx)?;
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) -> Result<()> {
        if !self.grad_of(to) {
            return Ok(());
        }
        match &mut grads[to.0] {
            Some(acc) => add_assign(acc, &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

fn add_assign(acc: &mut Tensor, g: &Tensor) -> Result<()> {
    tensor::same_shape("grad_accumulate", acc, g)?;
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
    tensor::ensure_finite("grad_accumulate", acc.data())
}

/// Gradient of a product with respect to its right operand.
fn matmul_rhs_grad(a: &Tensor, b: &Tensor, g: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (batch, m, k, n, rhs_batched) = tensor::matmul_dims(a.shape(), b.shape(), transpose_b)?;
    let mut out = vec![0.0f32; b.len()];
    let (ad, gd) = (a.data(), g.data());
    if rhs_batched {
        for i in 0..batch {
            let a_i = &ad[i * m * k..(i + 1) * m * k];
            let g_i = &gd[i * m * n..(i + 1) * m * n];
            let o = &mut out[i * k * n..(i + 1) * k * n];
            if transpose_b {
                tensor::gemm_tn_acc(g_i, a_i, o, m, n, k);
            } else {
                tensor::gemm_tn_acc(a_i, g_i, o, m, k, n);
            }
        }
    } else if transpose_b {
        tensor::gemm_tn_acc(gd, ad, &mut out, batch * m, n, k);
    } else {
        tensor::gemm_tn_acc(ad, gd, &mut out, batch * m, k, n);
    }
    tensor::ensure_finite("matmul_backward", &out)?;
    Ok(Tensor::from_parts(b.shape().to_vec(), out))
}

fn row_stats(row: &[f32]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().fold(0.0f64, |a, &v| a + v as f64) / d;
    let var = row.iter().fold(0.0f64, |a, &v| {
        let c = v as f64 - mean;
        a + c * c
    }) / d;
    (mean, 1.0 / libm::sqrt(var + LAYER_NORM_EPS))
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}
