//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates adjoints. A graph is built per
//! forward pass and dropped afterwards. Parameters are borrowed read-only,
//! so independent graphs over the same [`ParamStore`] can coexist.

use std::sync::Arc;

use super::tensor::{gemm, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One query block attending to one key/value block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

/// Block-sparse attention pattern: each query block attends only to its
/// key/value block, and masked keys are never attended.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub blocks: Vec<AttentionBlock>,
    /// `true` for keys that may be attended; length = key rows.
    pub key_valid: Vec<bool>,
}

impl AttentionLayout {
    /// Every query row in `[0, rows)` split into contiguous blocks of `block`
    /// rows attending within themselves.
    pub fn self_blocks(rows: usize, block: usize) -> Self {
        let blocks = (0..rows / block)
            .map(|b| AttentionBlock {
                q_start: b * block,
                q_len: block,
                kv_start: b * block,
                kv_len: block,
            })
            .collect();
        Self {
            blocks,
            key_valid: vec![true; rows],
        }
    }

    pub fn dense(q_rows: usize, kv_rows: usize) -> Self {
        Self {
            blocks: vec![AttentionBlock {
                q_start: 0,
                q_len: q_rows,
                kv_start: 0,
                kv_len: kv_rows,
            }],
            key_valid: vec![true; kv_rows],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
        probs: Vec<f64>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    MaxPoolRows {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    MeanPoolRows(Var, usize),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// Graph without parameters; only leaves created via [`Graph::leaf`].
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient tracked).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.expect("graph has no parameter store").get(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul {:?} × {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return Err(Error::Dimension(format!(
                "bias {:?} for {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(a, b, what)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Normalizes every row to zero mean and unit variance. No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Scaled dot-product attention over `heads` column groups, restricted
    /// to the blocks of `layout`. Query rows outside every block output zero.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttentionLayout>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model width {d}"
            )));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(Error::Dimension(format!(
                "attention q {:?} k {:?} v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if layout.key_valid.len() != kv.rows() {
            return Err(Error::Dimension("attention key mask length".into()));
        }
        for b in &layout.blocks {
            if b.q_start + b.q_len > qv.rows() || b.kv_start + b.kv_len > kv.rows() {
                return Err(Error::Dimension("attention block out of range".into()));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; qv.numel()];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for b in &layout.blocks {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in b.q_start..b.q_start + b.q_len {
                    let qi = &qd[i * d..][cols.clone()];
                    scores.clear();
                    let mut any = false;
                    for j in b.kv_start..b.kv_start + b.kv_len {
                        if layout.key_valid[j] {
                            let kj = &kd[j * d..][cols.clone()];
                            scores.push(qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale);
                            any = true;
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    if any {
                        softmax_in_place(&mut scores);
                    } else {
                        scores.iter_mut().for_each(|s| *s = 0.0);
                    }
                    let oi = &mut out[i * d..][cols.clone()];
                    for (jj, &p) in scores.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b.kv_start + jj) * d..][cols.clone()];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start >= end || end > c {
            return Err(Error::Dimension(format!("column slice {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(xv.rows() * w);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceCols(x, start, end), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Dimension("concat_cols row counts differ".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Dimension("concat_rows column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// `out[i] = x[index[i]]` (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if index.is_empty() || index.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::Dimension("gather_rows index out of range".into()));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![index.len(), c], data)?,
            Op::GatherRows(x, index),
            rg,
        ))
    }

    /// Max over each contiguous group of `valid.len() / groups` rows,
    /// ignoring rows with `valid[i] == false`. Groups without a valid row
    /// produce zeros.
    pub fn max_pool_rows(&mut self, x: Var, groups: usize, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if groups == 0 || rows % groups != 0 || valid.len() != rows {
            return Err(Error::Dimension(format!(
                "max_pool_rows: {rows} rows into {groups} groups"
            )));
        }
        let size = rows / groups;
        let mut out = vec![0.0; groups * c];
        let mut argmax = vec![None; groups * c];
        for g in 0..groups {
            for r in g * size..(g + 1) * size {
                if !valid[r] {
                    continue;
                }
                for j in 0..c {
                    let v = xv.data()[r * c + j];
                    let slot = g * c + j;
                    if argmax[slot].is_none() || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = Some(r);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![groups, c], out)?,
            Op::MaxPoolRows { x, argmax },
            rg,
        ))
    }

    /// Mean over each contiguous group of `group` rows.
    pub fn mean_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::Dimension(format!("mean_pool_rows: {rows} by {group}")));
        }
        let groups = rows / group;
        let mut out = vec![0.0; groups * c];
        for r in 0..rows {
            let g = r / group;
            for j in 0..c {
                out[g * c + j] += xv.data()[r * c + j] / group as f64;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![groups, c], out)?,
            Op::MeanPoolRows(x, group),
            rg,
        ))
    }

    /// `Σ_i BCE(sigmoid(logit_i), target_i)`, evaluated stably from logits.
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(Error::Dimension("bce targets length".into()));
        }
        let loss = lv
            .data()
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `x · w + b` for `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients aligned with the parameter store; untouched parameters get
    /// zero tensors.
    pub fn param_grads(&self) -> Vec<Tensor> {
        let params = self.params.expect("graph has no parameter store");
        params
            .ids()
            .map(|id| {
                self.param_vars[id.0]
                    .and_then(|v| self.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let go = gout.data();
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(go, bv.data(), &mut da, m, n, k);
                    acc(*a, like(*a, da));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), go, &mut db, m, k, n);
                    acc(*b, like(*b, db));
                }
            }
            Op::AddBias(x, b) => {
                let c = gout.cols();
                let mut db = vec![0.0; c];
                for row in go.chunks(c) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                acc(*x, gout.clone());
                acc(*b, like(*b, db));
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, like(*a, go.iter().zip(bv.data()).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, go.iter().zip(av.data()).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, c) => acc(*a, gout.map(|g| g * c)),
            Op::Gelu(a) => {
                let av = self.value(*a);
                acc(*a, like(*a, go.iter().zip(av.data()).map(|(g, &x)| g * gelu_grad(x)).collect()));
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let d = go
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                acc(*a, like(*a, d));
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                let d = go
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                acc(*a, like(*a, d));
            }
            Op::Sum(a) => {
                let g = go[0];
                acc(*a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, Tensor::full(self.value(*a).shape(), go[0] / n));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &go[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = istd * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &go[r * c..(r + 1) * c];
                    let dot = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut dq = vec![0.0; qv.numel()];
                let mut dk = vec![0.0; kv.numel()];
                let mut dv = vec![0.0; vv.numel()];
                let mut offset = 0;
                let mut ds = Vec::new();
                for b in &layout.blocks {
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in b.q_start..b.q_start + b.q_len {
                            let p = &probs[offset..offset + b.kv_len];
                            offset += b.kv_len;
                            let goi = &go[i * d..][cols.clone()];
                            ds.clear();
                            let mut dot = 0.0;
                            for (jj, &pj) in p.iter().enumerate() {
                                let j = b.kv_start + jj;
                                let vj = &vd[j * d..][cols.clone()];
                                let dp = goi.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>();
                                ds.push(dp);
                                dot += pj * dp;
                                if pj != 0.0 {
                                    for (dvv, g) in dv[j * d..][cols.clone()].iter_mut().zip(goi) {
                                        *dvv += pj * g;
                                    }
                                }
                            }
                            let qi = &qd[i * d..][cols.clone()];
                            for (jj, &pj) in p.iter().enumerate() {
                                if pj == 0.0 {
                                    continue;
                                }
                                let j = b.kv_start + jj;
                                let s = pj * (ds[jj] - dot) * scale;
                                let kj = &kd[j * d..][cols.clone()];
                                for (dqq, kk) in dq[i * d..][cols.clone()].iter_mut().zip(kj) {
                                    *dqq += s * kk;
                                }
                                for (dkk, qq) in dk[j * d..][cols.clone()].iter_mut().zip(qi) {
                                    *dkk += s * qq;
                                }
                            }
                        }
                    }
                }
                acc(*q, like(*q, dq));
                acc(*k, like(*k, dk));
                acc(*v, like(*v, dv));
            }
            Op::SliceCols(x, start, end) => {
                let xv = self.value(*x);
                let (c, w) = (xv.cols(), end - start);
                let mut dx = vec![0.0; xv.numel()];
                for (r, g) in go.chunks(w).enumerate() {
                    dx[r * c + start..r * c + end].copy_from_slice(g);
                }
                acc(*x, like(*x, dx));
            }
            Op::ConcatCols(parts) => {
                let total = gout.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(self.value(p).numel());
                    for row in go.chunks(total) {
                        dp.extend_from_slice(&row[off..off + w]);
                    }
                    off += w;
                    acc(p, like(p, dp));
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, like(p, go[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::GatherRows(x, index) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += go[r * c + j];
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::MaxPoolRows { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (slot, src) in argmax.iter().enumerate() {
                    if let Some(r) = src {
                        dx[r * c + slot % c] += go[slot];
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::MeanPoolRows(x, group) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    let g = r / group;
                    for j in 0..c {
                        dx[r * c + j] = go[g * c + j] / *group as f64;
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let d = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| go[0] * (sigmoid(x) - y))
                    .collect();
                acc(*logits, like(*logits, d));
            }
            Op::Reshape(x) => {
                acc(*x, like(*x, go.to_vec()));
            }
        }
    }
}

pub fn sigmoid_value(x: f64) -> f64 {
    sigmoid(x)
}

pub fn gelu_value(x: f64) -> f64 {
    gelu(x)
}
