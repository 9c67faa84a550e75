//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order: an operation can only consume handles that exist. One
//! call to [`Tape::backward`] walks the records in reverse and accumulates
//! gradients into every leaf created with `requires_grad`.
//!
//! Broadcasting in the binary ops is limited to two cases: one operand is a
//! single element, or one operand's shape is a trailing suffix of the other's
//! (a bias `[d]` against activations `[b, d]`). Anything else is a dimension
//! error; reshapes and transposes are explicit.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, validate_shape, Tensor};

/// `sqrt(2 / pi)` for the tanh form of GELU.
pub const GELU_K: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-form GELU.
pub const GELU_C: f64 = 0.044_715;
/// Layer-norm stabilizer.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sub,
    Relu,
    Gelu,
    Exp,
    Ln1p,
    SoftmaxLastDim,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Ln1p(Var),
    Abs(Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    BroadcastTo(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf. It participates in gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.requires_grad = true;
        t.grad = None;
        self.leaf(t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Which side of the kink every ReLU and abs input lies on, in tape order.
    /// Two evaluations with different signatures straddle a point where the
    /// function is not differentiable.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                out.extend(self.data(x).iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf; `None` if backward never reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Attention weights `[batch, heads, len_q, len_k]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.needs(inputs);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, needs_grad)
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `a[.., k] × b[k, n] → [.., n]`; leading extents of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {sa:?} x {sb:?}"
            )));
        }
        let n = sb[1];
        let rows = self.value(a).numel() / k;
        let data = matmul_raw(self.data(a), self.data(b), rows, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.emit(shape, data, Op::MatMul { a, b, rows, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose expects 2-d, got {s:?}")));
        }
        let data = transpose_raw(self.data(x), s[0], s[1]);
        Ok(self.emit(vec![s[1], s[0]], data, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.emit(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    // ── elementwise ───────────────────────────────────────────────────

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Mul | ElementwiseOp::Sub => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(inputs[0], inputs[1]),
            ElementwiseOp::Mul => self.mul(inputs[0], inputs[1]),
            ElementwiseOp::Sub => self.sub(inputs[0], inputs[1]),
            ElementwiseOp::Relu => Ok(self.relu(inputs[0])),
            ElementwiseOp::Gelu => Ok(self.gelu(inputs[0])),
            ElementwiseOp::Exp => Ok(self.exp(inputs[0])),
            ElementwiseOp::Ln1p => self.ln1p(inputs[0]),
            ElementwiseOp::SoftmaxLastDim => Ok(self.softmax_lastdim(inputs[0])),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let (na, nb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        Ok((shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.emit(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.emit(shape, data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.emit(shape, data, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.emit(shape, data, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `ln(1 + x)`, defined for `x > -1`.
    pub fn ln1p(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|&&v| v <= -1.0) {
            return Err(Error::Domain(format!("ln1p undefined at {bad}")));
        }
        Ok(self.unary(x, Op::Ln1p(x), f64::ln_1p))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(d).for_each(softmax_in_place);
        self.emit(shape, data, Op::Softmax(x), &[x])
    }

    // ── normalization & reductions ───────────────────────────────────

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm over last extent {d} needs gamma/beta [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        Ok(self.emit(
            shape,
            out,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.emit(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.emit(vec![1], vec![m], Op::Mean(x), &[x])
    }

    // ── structural ────────────────────────────────────────────────────

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("cannot concat {s:?} with {first:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        Ok(self.emit(shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.emit(shape, data, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Repeats `x` over new or unit leading extents; `x`'s shape (ignoring
    /// leading ones) must be a trailing suffix of `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        validate_shape(shape)?;
        let src_shape = self.shape(x).to_vec();
        let trimmed: Vec<usize> = src_shape.iter().copied().skip_while(|&e| e == 1).collect();
        if trimmed.len() > shape.len() || shape[shape.len() - trimmed.len()..] != trimmed[..] {
            return Err(Error::dim(format!("cannot broadcast {src_shape:?} to {shape:?}")));
        }
        let src = self.data(x);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| src[i % src.len()]).collect();
        Ok(self.emit(shape.to_vec(), data, Op::BroadcastTo(x), &[x]))
    }

    /// Row lookup `table[indices[i], :]` → `[indices.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("gather_rows expects a 2-d table, got {s:?}")));
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Index(format!("row {bad} out of range for table with {} rows", s[0])));
        }
        let cols = s[1];
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        Ok(self.emit(
            vec![indices.len(), cols],
            data,
            Op::GatherRows { table, indices: indices.to_vec() },
            &[table],
        ))
    }

    // ── attention ─────────────────────────────────────────────────────

    /// Scaled dot-product multi-head attention.
    ///
    /// `q: [b, lq, d]`, `k, v: [b, lk, d]` with `d % heads == 0`. Each head
    /// uses a `d / heads` slice and scores are scaled by `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::dim(format!(
                "attention shapes q {sq:?}, k {sk:?}, v {sv:?} are incompatible"
            )));
        }
        let d = sq[2];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention dim {d} not divisible by {heads} heads")));
        }
        let dims = AttnDims { b: sq[0], lq: sq[1], lk: sk[1], d, heads };
        let (out, probs) = attention_forward(self.data(q), self.data(k), self.data(v), dims);
        Ok(self.emit(sq, out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, rows, k, n } => {
                if wants(a) {
                    let bt = transpose_raw(self.data(b), k, n);
                    send(a, matmul_raw(g, &bt, rows, n, k));
                }
                if wants(b) {
                    let at = transpose_raw(self.data(a), rows, k);
                    send(b, matmul_raw(&at, g, k, rows, n));
                }
            }
            &Op::Add(a, b) => {
                send(a, reduce_to(g, self.value(a).numel()));
                send(b, reduce_to(g, self.value(b).numel()));
            }
            &Op::Sub(a, b) => {
                send(a, reduce_to(g, self.value(a).numel()));
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                send(b, reduce_to(&neg, self.value(b).numel()));
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                if wants(a) {
                    let nb = db.len();
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * db[i % nb]).collect();
                    send(a, reduce_to(&full, da.len()));
                }
                if wants(b) {
                    let na = da.len();
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * da[i % na]).collect();
                    send(b, reduce_to(&full, db.len()));
                }
            }
            &Op::Relu(x) => {
                let xd = self.data(x);
                send(x, g.iter().zip(xd).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect());
            }
            &Op::Gelu(x) => {
                let xd = self.data(x);
                send(x, g.iter().zip(xd).map(|(gi, &v)| gi * gelu_grad(v)).collect());
            }
            &Op::Exp(x) => send(x, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
            &Op::Ln1p(x) => {
                let xd = self.data(x);
                send(x, g.iter().zip(xd).map(|(gi, v)| gi / (1.0 + v)).collect());
            }
            &Op::Abs(x) => {
                let xd = self.data(x);
                send(x, g.iter().zip(xd).map(|(gi, &v)| gi * sign(v)).collect());
            }
            &Op::Scale(x, c) => send(x, g.iter().map(|gi| gi * c).collect()),
            &Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).numel();
                let gm = self.data(*gamma);
                if wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    send(*beta, db);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    send(*gamma, dg);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dxr, gr), hr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dxr[j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    send(*x, dx);
                }
            }
            &Op::Sum(x) => send(x, vec![g[0]; self.value(x).numel()]),
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                send(x, vec![g[0] / n as f64; n]);
            }
            &Op::Reshape(x) => send(x, g.to_vec()),
            &Op::Transpose(x) => {
                let s = self.shape(x);
                send(x, transpose_raw(g, s[1], s[0]));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    if wants(v) {
                        let mut part = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * shape[*axis] * inner + offset;
                            part.extend_from_slice(&g[base..base + block]);
                        }
                        send(v, part);
                    }
                    offset += block;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let s = self.shape(x);
                let len = node.value.shape()[axis];
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(x).numel()];
                for o in 0..outer {
                    let dst = o * s[axis] * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(x, dx);
            }
            &Op::BroadcastTo(x) => send(x, reduce_to(g, self.value(x).numel())),
            Op::GatherRows { table, indices } => {
                let cols = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] += g[r * cols + c];
                    }
                }
                send(*table, dt);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                let dims = AttnDims { b: sq[0], lq: sq[1], lk: sk[1], d: sq[2], heads: *heads };
                let (dq, dk, dv) = attention_backward(self.data(*q), self.data(*k), self.data(*v), probs, g, dims);
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn gelu(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
    if a == b || nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::dim(format!("shapes {a:?} and {b:?} are not broadcast-compatible")))
}

/// Folds a gradient over the broadcast shape back onto `n` trailing elements.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, gi) in g.iter().enumerate() {
        out[i % n] += gi;
    }
    out
}

#[derive(Clone, Copy)]
struct AttnDims {
    b: usize,
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
}

fn attention_forward(q: &[f64], k: &[f64], v: &[f64], dm: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let AttnDims { b, lq, lk, d, heads } = dm;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * lq * d];
    let mut probs = vec![0.0; b * heads * lq * lk];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..lq {
                let qrow = &q[(bi * lq + i) * d + h * dh..][..dh];
                let p = &mut probs[((bi * heads + h) * lq + i) * lk..][..lk];
                for j in 0..lk {
                    let krow = &k[(bi * lk + j) * d + h * dh..][..dh];
                    p[j] = scale * qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>();
                }
                softmax_in_place(p);
                let orow = &mut out[(bi * lq + i) * d + h * dh..][..dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = &v[(bi * lk + j) * d + h * dh..][..dh];
                    for t in 0..dh {
                        orow[t] += pj * vrow[t];
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    dm: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims { b, lq, lk, d, heads } = dm;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
    let mut dp = vec![0.0; lk];
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..lq {
                let p = &probs[((bi * heads + h) * lq + i) * lk..][..lk];
                let go = &g[(bi * lq + i) * d + h * dh..][..dh];
                for j in 0..lk {
                    let vo = (bi * lk + j) * d + h * dh;
                    dp[j] = go.iter().zip(&v[vo..vo + dh]).map(|(a, c)| a * c).sum();
                    for t in 0..dh {
                        dv[vo + t] += p[j] * go[t];
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                let qo = (bi * lq + i) * d + h * dh;
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = (bi * lk + j) * d + h * dh;
                    for t in 0..dh {
                        dq[qo + t] += ds * k[ko + t];
                        dk[ko + t] += ds * q[qo + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m_data = [1., 2., 3., 4., 5., 6., 7., 8., 9.];
        let m = tape.constant(t(&[3, 3], &m_data));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(out), &m_data);
    }

    #[test]
    fn hand_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[0., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.data(c), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_trivia() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.5));
        let r = tape.elementwise(ElementwiseOp::Relu, &[x]).unwrap();
        assert_eq!(tape.data(r), &[0.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let l = tape.elementwise(ElementwiseOp::Ln1p, &[z]).unwrap();
        assert_eq!(tape.data(l), &[0.0]);
        let zs = tape.constant(Tensor::zeros(&[3]));
        let s = tape.elementwise(ElementwiseOp::SoftmaxLastDim, &[zs]).unwrap();
        for &p in tape.data(s) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let bias = tape.constant(Tensor::ones(&[3]));
        let s = tape.constant(Tensor::scalar(2.0));
        let sum = tape.add(a, bias).unwrap();
        assert_eq!(tape.shape(sum), &[2, 3]);
        let out = tape.mul(bias, s).unwrap();
        assert_eq!(tape.data(out), &[2.0, 2.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.add(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, LN_EPS).unwrap();
        // mean 2, var 1: (x - 2) / sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((tape.data(y)[0] + expect).abs() < 1e-15);
        assert!((tape.data(y)[1] - expect).abs() < 1e-15);

        let g3 = tape.constant(Tensor::ones(&[3]));
        let b3 = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let y = tape.layer_norm(c, g3, b3, LN_EPS).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_eps_and_shapes() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(tape.layer_norm(x, g, b, LN_EPS).is_err());
        let x2 = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(tape.layer_norm(x2, g, b, 0.0).is_err());
    }

    #[test]
    fn backward_leaf_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x), Some(&[1.0][..]));

        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[2.0, 4.0][..]));
        // second call accumulates
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[4.0, 8.0][..]));
        tape.zero_grad();
        assert_eq!(tape.grad(x), None);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(&Tensor::vector(vec![3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let loss = tape.sum(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c), None);
        assert_eq!(tape.grad(p), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1., 2.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.data(c), &[1., 3., 4., 2., 5., 6.]);
        let back = tape.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(tape.data(back), tape.data(b));
    }

    #[test]
    fn gather_rows_checks_range() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.gather_rows(table, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn attention_probs_sum_to_one() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin()));
        let k = tape.constant(Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.91).cos()));
        let v = tape.constant(Tensor::from_fn(&[2, 5, 4], |i| i as f64 * 0.1));
        let o = tape.attention(q, k, v, 2).unwrap();
        let probs = tape.attention_probs(o).unwrap();
        for row in probs.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
        assert!(matches!(tape.attention(q, k, v, 3), Err(Error::Config(_))));
    }
}
