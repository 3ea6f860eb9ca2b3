// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over a fixed op set.
//!
//! A [`Graph`] is built front to back for one forward pass; node indices are
//! a topological order, so [`Graph::backward`] walks the tape in reverse.

use crate::{NnError, ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
    TopKRelu { x: Var, mask: Vec<bool> },
    SumAll(Var),
    MeanAll(Var),
    PadZeroCol(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax(..) => "softmax",
            Op::Attention { .. } => "attention",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::TopKRelu { .. } => "topk_relu",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::PadZeroCol(..) => "pad_zero_col",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// One forward pass worth of recorded computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims differ: [{m},{k}] x [{k2},{n}]");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{}: shape mismatch", op.name());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(&shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let r = self.value(row);
        assert_eq!(r.len(), n, "add_row: row length {} != {n}", r.len());
        let rd = r.data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_exact_mut(n) {
            chunk.iter_mut().zip(rd).for_each(|(o, &b)| *o = *o + b);
        }
        let shape = self.value(x).shape().to_vec();
        debug_assert_eq!(out.len(), m * n);
        self.push(Tensor::new(&shape, out), Op::AddRow(x, row))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, data), op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| v.abs(), Op::Abs(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
        self.map(x, |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()), Op::Gelu(x))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(gain).len(), n, "layernorm: gain length");
        assert_eq!(self.value(bias).len(), n, "layernorm: bias length");
        let eps = T::from_f64(LN_EPS);
        let nf = T::from_f64(n as f64);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gd[j] + bd[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::Softmax(x))
    }

    /// Causal multi-head self-attention core.
    ///
    /// `qkv` is `[batch*seq, 3*d]` holding queries, keys and values side by
    /// side; the result is `[batch*seq, d]` with heads concatenated.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (rows, c3) = self.value(qkv).dims2();
        assert_eq!(rows, batch * seq, "attention: rows != batch*seq");
        assert_eq!(c3 % 3, 0, "attention: qkv width not divisible by 3");
        let d = c3 / 3;
        assert_eq!(d % heads, 0, "attention: d not divisible by heads");
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &src[(b * seq + i) * c3 + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &src[(b * seq + j) * c3 + d + h * dh..][..dh];
                        *s = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    probs[pbase + i * seq..pbase + i * seq + i + 1].copy_from_slice(&scores[..=i]);
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &p) in scores[..=i].iter().enumerate() {
                        let vj = &src[(b * seq + j) * c3 + 2 * d + h * dh..][..dh];
                        o.iter_mut().zip(vj).for_each(|(o, &v)| *o = *o + p * v);
                    }
                }
            }
        }
        self.push(Tensor::new(&[rows, d], out), Op::Attention { qkv, batch, seq, heads, probs })
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.value(table).dims2();
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range for vocab {v}");
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        self.push(Tensor::new(&[ids.len(), d], out), Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, c) = self.value(logits).dims2();
        assert_eq!(n, targets.len(), "cross_entropy: {n} rows vs {} targets", targets.len());
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            assert!(t < c, "cross_entropy: target {t} out of range");
            // log-sum-exp in f64 so the loss stays exact when p[t] underflows
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
            let lse = mx + row.iter().map(|&v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
            softmax_in_place(row);
        }
        let loss = T::from_f64(total / n as f64);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse: shape mismatch");
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let loss = s / T::from_f64(ta.len() as f64);
        self.push(Tensor::scalar(loss), Op::Mse(a, b))
    }

    /// Keeps, per row, the `k` largest strictly positive entries and zeroes the rest.
    ///
    /// When `rank_scale` is given, entries are ranked by `x[j] * rank_scale[j]`
    /// instead of `x[j]`. Ties go to the lower column index.
    pub fn topk_relu(&mut self, x: Var, k: usize, rank_scale: Option<&[T]>) -> Var {
        let (_, n) = self.value(x).dims2();
        if let Some(s) = rank_scale {
            assert_eq!(s.len(), n, "topk_relu: rank_scale length");
        }
        let xd = self.value(x).data();
        let mut mask = vec![false; xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut idx: Vec<usize> = Vec::with_capacity(n);
        for (r, row) in xd.chunks_exact(n).enumerate() {
            topk_positive(row, k, rank_scale, &mut idx);
            for &j in &idx {
                mask[r * n + j] = true;
                out[r * n + j] = row[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(&shape, out), Op::TopKRelu { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Appends a constant zero column: `[m,n] -> [m,n+1]`.
    pub fn pad_zero_col(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(m * (n + 1));
        for row in xd.chunks_exact(n) {
            out.extend_from_slice(row);
            out.push(T::zero());
        }
        self.push(Tensor::new(&[m, n + 1], out), Op::PadZeroCol(x))
    }

    /// Reverse pass from a scalar `loss`, populating node gradients.
    ///
    /// Returns a numerical-failure error naming the first op that produced a
    /// non-finite value when the loss is not finite.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        if !self.value(loss).all_finite() {
            let op = self
                .nodes
                .iter()
                .find(|n| !n.value.all_finite())
                .map(|n| n.op.name())
                .unwrap_or("unknown");
            return Err(NnError::NonFinite { op });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                accumulate(&mut self.nodes[v.0].grad, dv);
            }
        }
        Ok(())
    }

    /// Adds gradients of parameter nodes into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for n in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&n.op, &n.grad) {
                let p = store.get_mut(*id);
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g, n as isize, 1, val(*b), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), val(*a), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::AddRow(x, row) => {
                let n = self.value(*row).len();
                let mut dr = vec![T::zero(); n];
                for chunk in g.chunks_exact(n) {
                    dr.iter_mut().zip(chunk).for_each(|(d, &v)| *d = *d + v);
                }
                vec![(*x, g.to_vec()), (*row, dr)]
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Relu(x) => {
                let dx = g.iter().zip(val(*x)).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                vec![(*x, dx)]
            }
            Op::Abs(x) => {
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
                let three = T::from_f64(3.0);
                let dx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        g * d
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gain, xhat, rstd, bias } => {
                let (m, n) = self.value(*x).dims2();
                let gd = val(*gain);
                let nf = T::from_f64(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        dgain[j] = dgain[j] + gr[j] * hr[j];
                        dbias[j] = dbias[j] + gr[j];
                        dxhat[j] = gr[j] * gd[j];
                        mean_d = mean_d + dxhat[j];
                        mean_dh = mean_dh + dxhat[j] * hr[j];
                    }
                    mean_d = mean_d / nf;
                    mean_dh = mean_dh / nf;
                    for j in 0..n {
                        dx[i * n + j] = rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Softmax(x) => {
                let (_, n) = node.value.dims2();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Attention { qkv, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let src = val(*qkv);
                let c3 = self.value(*qkv).dims2().1;
                let d = c3 / 3;
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let mut dsrc = vec![T::zero(); src.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let go = &g[(b * seq + i) * d + h * dh..][..dh];
                            let p = &probs[pbase + i * seq..pbase + i * seq + i + 1];
                            for (j, dpj) in dp.iter_mut().enumerate().take(i + 1) {
                                let vj = &src[(b * seq + j) * c3 + 2 * d + h * dh..][..dh];
                                *dpj = dot(go, vj);
                            }
                            let s = dot(p, &dp[..=i]);
                            for j in 0..=i {
                                let pj = p[j];
                                // dV_j += p_ij * dO_i
                                let vo = (b * seq + j) * c3 + 2 * d + h * dh;
                                for t in 0..dh {
                                    dsrc[vo + t] = dsrc[vo + t] + pj * go[t];
                                }
                                let ds = pj * (dp[j] - s) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let qo = (b * seq + i) * c3 + h * dh;
                                let ko = (b * seq + j) * c3 + d + h * dh;
                                for t in 0..dh {
                                    dsrc[qo + t] = dsrc[qo + t] + ds * src[ko + t];
                                    dsrc[ko + t] = dsrc[ko + t] + ds * src[qo + t];
                                }
                            }
                        }
                    }
                }
                vec![(*qkv, dsrc)]
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2();
                let mut dt = vec![T::zero(); v * d];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a = *a + b);
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let coef = g[0] / T::from_f64(n as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] = dl[i * c + t] - coef;
                }
                vec![(*logits, dl)]
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let coef = T::from_f64(2.0) * g[0] / T::from_f64(va.len() as f64);
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| coef * (x - y)).collect();
                let db = da.iter().map(|&v| -v).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::TopKRelu { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
                vec![(*x, dx)]
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / T::from_f64(n as f64); n])]
            }
            Op::PadZeroCol(x) => {
                let (_, n) = self.value(*x).dims2();
                let dx = g.chunks_exact(n + 1).flat_map(|r| r[..n].iter().copied()).collect();
                vec![(*x, dx)]
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, dv: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(dv).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(dv),
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s = s + *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// Indices of the `k` largest strictly positive entries of `row` (ranked by
/// `row[j] * scale[j]` when a scale is given), lowest index first on ties.
pub fn topk_positive<T: Scalar>(row: &[T], k: usize, scale: Option<&[T]>, out: &mut Vec<usize>) {
    out.clear();
    out.extend((0..row.len()).filter(|&j| row[j] > T::zero()));
    let score = |j: usize| match scale {
        Some(s) => row[j] * s[j],
        None => row[j],
    };
    if out.len() > k {
        out.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        out.truncate(k);
        out.sort_unstable();
    }
}
