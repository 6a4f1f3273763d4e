//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are either
//! constants or parameters borrowed from a [`ParamStore`]; calling
//! [`Graph::backward`] on a scalar node returns the gradient of every
//! parameter that took part. Graph operations are two-dimensional
//! (`[rows, cols]`), which is all the model needs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    self, dropout_mask, layer_norm_with_cache, masked_softmax_rows, matmul_into, normal_cdf,
    normal_pdf, sigmoid, LayerNormCache, RngState, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation families, used for fault injection in gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    AddBias,
    Add,
    Scale,
    MulConst,
    Gelu,
    Softmax,
    LayerNorm,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    MeanRows,
    MeanOf,
    Transpose,
    Gather,
    Sum,
    BceWithLogits,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Scale,
        OpKind::MulConst,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::MeanRows,
        OpKind::MeanOf,
        OpKind::Transpose,
        OpKind::Gather,
        OpKind::Sum,
        OpKind::BceWithLogits,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::MulConst => "mul_const",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::MeanRows => "mean_rows",
            OpKind::MeanOf => "mean_of",
            OpKind::Transpose => "transpose",
            OpKind::Gather => "gather",
            OpKind::Sum => "sum",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    MeanOf(Vec<Var>),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    BceWithLogits(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Constant | Op::Param(_) => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::MeanOf(_) => OpKind::MeanOf,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Gather(..) => OpKind::Gather,
            Op::Sum(_) => OpKind::Sum,
            Op::BceWithLogits(..) => OpKind::BceWithLogits,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the parameters reached by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in &other.grads {
            let slot = self.grads.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += scale * v;
            }
        }
    }

    pub fn insert(&mut self, id: ParamId, grad: Vec<f64>) {
        self.grads.insert(id, grad);
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    rng: Option<RngState>,
    frozen: HashSet<ParamId>,
    corrupt: Option<OpKind>,
    counters: BTreeMap<&'static str, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            rng: None,
            frozen: HashSet::new(),
            corrupt: None,
            counters: BTreeMap::new(),
        }
    }

    /// Training graph: dropout draws its masks from `rng`.
    pub fn training(rng: RngState) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Returns the dropout stream, advanced past every mask drawn so far.
    pub fn take_rng(&mut self) -> Option<RngState> {
        self.rng.take()
    }

    /// Parameters whose gradients are never computed.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    /// Test hook: scales every input gradient produced by `kind` by 1.5.
    pub fn corrupt_backward(&mut self, kind: Option<OpKind>) {
        self.corrupt = kind;
    }

    pub fn bump(&mut self, counter: &'static str) {
        *self.counters.entry(counter).or_default() += 1;
    }

    pub fn counter(&self, counter: &str) -> usize {
        self.counters.get(counter).copied().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param_id(store, id))
    }

    pub fn param_id(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs = !self.frozen.contains(&id);
        let mut value = store.tensor(id).clone();
        value.set_requires_grad(false);
        self.push(value, Op::Param(id), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let out = Tensor::new(&[r, c], data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), needs))
    }

    /// `x·w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[c.len()]));
        }
        let data = self.value(x).data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let out = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MulConst(x, Rc::new(c)), needs))
    }

    /// Inverted dropout; identity on inference graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1]")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.nodes[x.0].value.len(), p, rng);
        self.mul_const(x, mask)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Row softmax; columns with `key_mask[j] == false` get probability 0.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        self.dims2(x, "softmax")?;
        let out = masked_softmax_rows(self.value(x), key_mask)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.dims2(x, "layer_norm")?;
        let (out, cache) =
            layer_norm_with_cache(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::new(&[end - start, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceRows(x, start), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + end]);
        }
        let out = Tensor::new(&[r, end - start], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols(x, start), needs))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; c];
        for row in src.chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let out = Tensor::new(&[1, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MeanRows(x), needs))
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("mean of an empty sequence".into()))?;
        let shape = self.shape(first).to_vec();
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::shape("mean_of", &shape, self.shape(p)));
            }
        }
        // Summing in sorted order makes the result independent of part order
        // bit for bit; equal values short-circuit so the mean of copies is exact.
        let n = parts.len() as f64;
        let mut column = Vec::with_capacity(parts.len());
        let data = (0..self.value(first).len())
            .map(|i| {
                column.clear();
                column.extend(parts.iter().map(|&p| self.value(p).data()[i]));
                column.sort_by(f64::total_cmp);
                if column[0] == column[column.len() - 1] {
                    column[0]
                } else {
                    column.iter().sum::<f64>() / n
                }
            })
            .collect();
        let out = Tensor::new(&shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::MeanOf(parts.to_vec()), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = Tensor::new(&[c, r], transpose_data(self.value(x).data(), r, c))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Transpose(x), needs))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::Invalid("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean binary cross-entropy over every `[B, C]` entry, from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "bce_with_logits")?;
        if targets.len() != b * c {
            return Err(Error::shape("bce_with_logits", &[b, c], &[targets.len()]));
        }
        let loss = bce_with_logits_value(self.value(logits).data(), targets);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, targets.to_vec()),
            needs,
        ))
    }

    /// Mean softmax cross-entropy over `B` rows.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if classes.len() != b {
            return Err(Error::shape("cross_entropy", &[b, c], &[classes.len()]));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::Invalid(format!("class index {bad} out of range for {c} classes")));
        }
        let loss = cross_entropy_value(self.value(logits).data(), c, classes);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, classes.to_vec()),
            needs,
        ))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let mut contributions: Vec<(Var, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.grads
                        .entry(*id)
                        .and_modify(|g| add_into(g, &dy))
                        .or_insert(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a, "matmul")?;
                    let n = self.shape(*b)[1];
                    if self.needs(*a) {
                        // dA = dY · Bᵀ
                        let bt = transpose_data(self.value(*b).data(), k, n);
                        let mut da = vec![0.0; m * k];
                        matmul_into(&dy, &bt, &mut da, m, n, k);
                        contributions.push((*a, da));
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · dY
                        let at = transpose_data(self.value(*a).data(), m, k);
                        let mut db = vec![0.0; k * n];
                        matmul_into(&at, &dy, &mut db, k, m, n);
                        contributions.push((*b, db));
                    }
                }
                Op::AddBias(x, b) => {
                    let c = self.shape(*b)[0];
                    if self.needs(*b) {
                        let mut db = vec![0.0; c];
                        for row in dy.chunks(c) {
                            add_into(&mut db, row);
                        }
                        contributions.push((*b, db));
                    }
                    contributions.push((*x, dy));
                }
                Op::Add(a, b) => {
                    contributions.push((*a, dy.clone()));
                    contributions.push((*b, dy));
                }
                Op::Scale(x, s) => {
                    contributions.push((*x, dy.iter().map(|g| g * s).collect()));
                }
                Op::MulConst(x, c) => {
                    contributions.push((*x, dy.iter().zip(c.iter()).map(|(g, m)| g * m).collect()));
                }
                Op::Gelu(x) => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&dy)
                        .map(|(&v, g)| g * (normal_cdf(v) + v * normal_pdf(v)))
                        .collect();
                    contributions.push((*x, dx));
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(c).zip(dy.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    contributions.push((*x, dx));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let d = node.value.cols();
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut dx = vec![0.0; dy.len()];
                    for (r, (gr, hr)) in dy.chunks(d).zip(cache.xhat.chunks(d)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                            let dh = gr[j] * g[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let scale = cache.inv_std[r] / d as f64;
                        for j in 0..d {
                            let dh = gr[j] * g[j];
                            dx[r * d + j] = scale * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    contributions.push((*x, dx));
                    contributions.push((*gamma, dgamma));
                    contributions.push((*beta, dbeta));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        contributions.push((p, dy[offset..offset + len].to_vec()));
                        offset += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    let (r, c) = self.dims2(*x, "slice_rows")?;
                    let mut dx = vec![0.0; r * c];
                    dx[start * c..start * c + dy.len()].copy_from_slice(&dy);
                    contributions.push((*x, dx));
                }
                Op::ConcatCols(parts) => {
                    let r = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Vec::with_capacity(r * w);
                        for row in 0..r {
                            dp.extend_from_slice(&dy[row * total + offset..row * total + offset + w]);
                        }
                        contributions.push((p, dp));
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = self.dims2(*x, "slice_cols")?;
                    let w = node.value.cols();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        dx[row * c + start..row * c + start + w]
                            .copy_from_slice(&dy[row * w..(row + 1) * w]);
                    }
                    contributions.push((*x, dx));
                }
                Op::MeanRows(x) => {
                    let (r, _) = self.dims2(*x, "mean_rows")?;
                    let scaled: Vec<f64> = dy.iter().map(|g| g / r as f64).collect();
                    contributions.push((*x, scaled.repeat(r)));
                }
                Op::MeanOf(parts) => {
                    let n = parts.len() as f64;
                    let scaled: Vec<f64> = dy.iter().map(|g| g / n).collect();
                    for &p in parts {
                        contributions.push((p, scaled.clone()));
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = self.dims2(*x, "transpose")?;
                    contributions.push((*x, transpose_data(&dy, c, r)));
                }
                Op::Gather(table, ids) => {
                    let (v, d) = self.dims2(*table, "gather")?;
                    let mut dt = vec![0.0; v * d];
                    for (row, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &dy[row * d..(row + 1) * d]);
                    }
                    contributions.push((*table, dt));
                }
                Op::Sum(x) => {
                    contributions.push((*x, vec![dy[0]; self.value(*x).len()]));
                }
                Op::BceWithLogits(logits, targets) => {
                    let z = self.value(*logits).data();
                    let n = z.len() as f64;
                    let dx = z
                        .iter()
                        .zip(targets)
                        .map(|(&zi, &yi)| dy[0] * (sigmoid(zi) - yi) / n)
                        .collect();
                    contributions.push((*logits, dx));
                }
                Op::CrossEntropy(logits, classes) => {
                    let z = self.value(*logits);
                    let c = z.cols();
                    let b = classes.len() as f64;
                    let mut dx = masked_softmax_rows(z, None)?.into_data();
                    for (row, &k) in classes.iter().enumerate() {
                        dx[row * c + k] -= 1.0;
                    }
                    for v in &mut dx {
                        *v *= dy[0] / b;
                    }
                    contributions.push((*logits, dx));
                }
            }

            let corrupt = self.corrupt.is_some() && self.corrupt == node.op.kind();
            for (v, mut g) in contributions {
                if !self.needs(v) {
                    continue;
                }
                if corrupt {
                    g.iter_mut().for_each(|x| *x *= 1.5);
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn transpose_data(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `max(z, 0) - z·y + ln(1 + e^{-|z|})`, averaged.
pub(crate) fn bce_with_logits_value(logits: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}

pub(crate) fn cross_entropy_value(logits: &[f64], classes: usize, targets: &[usize]) -> f64 {
    let total: f64 = logits
        .chunks(classes)
        .zip(targets)
        .map(|(row, &k)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[k]
        })
        .sum();
    total / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: &[usize], data: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::new(shape, data.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn square_gradient() {
        let store = store_with("x", &[1, 1], &[3.0]);
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.matmul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap(), &[6.0]);
    }

    #[test]
    fn embedding_gradient_counts_occurrences() {
        let store = store_with("e", &[4, 2], &[0.3; 8]);
        let ids = [1, 3, 1, 0, 1];
        let mut g = Graph::new();
        let e = g.param(&store, "e").unwrap();
        let rows = g.gather(e, &ids).unwrap();
        let s = g.sum(rows);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(ParamId(0)).unwrap(),
            &[1.0, 1.0, 3.0, 3.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let store = store_with("e", &[2, 2], &[0.0; 4]);
        let mut g = Graph::new();
        let e = g.param(&store, "e").unwrap();
        assert!(g.gather(e, &[2]).is_err());
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let store = store_with("w", &[1, 1], &[2.0]);
        let mut g = Graph::new();
        g.freeze([ParamId(0)]);
        let w = g.param(&store, "w").unwrap();
        let s = g.sum(w);
        assert!(g.backward(s).unwrap().get(ParamId(0)).is_none());
    }

    #[test]
    fn dropout_is_identity_on_inference_graph() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 2]));
        let y = g.dropout(x, 0.9).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
