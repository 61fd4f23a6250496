//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are bound from one or more [`ParamStore`]s; a store bound as
//! frozen contributes constants, a store bound as trainable contributes leaves
//! whose gradients [`Graph::backward`] returns. The graph is single-use and
//! single-threaded; build one per batch.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param { store: usize, id: ParamId },
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gather { table: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ReplaceRows { base: Var, rows: Vec<usize>, src: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gelu(Var),
    MaskedSoftmax(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    SumSquares(Var),
    NegLogSigmoid(Var),
    Mean(Var),
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    stores: Vec<(&'a ParamStore, bool)>,
    nodes: Vec<Node<'a>>,
    bound: HashMap<(usize, ParamId), Var>,
}

/// Gradients for every trainable store, indexed `[store][param]`.
#[derive(Debug, Clone)]
pub struct Gradients {
    per_store: Vec<Vec<Option<Tensor>>>,
}

impl Gradients {
    pub fn get(&self, store: usize, id: ParamId) -> Option<&Tensor> {
        self.per_store.get(store)?.get(id.index())?.as_ref()
    }

    pub fn store(&self, store: usize) -> &[Option<Tensor>] {
        &self.per_store[store]
    }

    pub fn into_store(mut self, store: usize) -> Vec<Option<Tensor>> {
        std::mem::take(&mut self.per_store[store])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `-ln σ(x)` computed without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    /// `stores` pairs each parameter store with whether it is trainable.
    pub fn new(stores: &[(&'a ParamStore, bool)]) -> Self {
        Self { stores: stores.to_vec(), nodes: Vec::new(), bound: HashMap::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Constant, false)
    }

    /// Binds parameter `id` of store `store`. Repeated binds return the same
    /// node so gradients accumulate in one place.
    pub fn param(&mut self, store: usize, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(store, id)) {
            return v;
        }
        let (ps, trainable) = self.stores[store];
        let value = Cow::Borrowed(ps.get(id));
        let v = if trainable {
            self.push(value, Op::Param { store, id }, true)
        } else {
            self.push(value, Op::Constant, false)
        };
        self.bound.insert((store, id), v);
        v
    }

    /// Same value, gradient stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(Cow::Owned(value), Op::Detach, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.owned(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.owned(out, Op::Sub(a, b), &[a, b])
    }

    /// Adds the 1×c row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), out.cols());
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += x;
            }
        }
        self.owned(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(k);
        self.owned(out, Op::Scale(a, k), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.owned(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.owned(out, Op::MatMulNT(a, b), &[a, b])
    }

    /// `x · W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.owned(out, Op::Gather { table, idx }, &[table])
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        self.gather(x, vec![r])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols());
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.owned(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[c0..c0 + t.cols()].copy_from_slice(t.row(r));
                c0 += t.cols();
            }
        }
        self.owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.owned(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Copy of `base` with row `rows[k]` replaced by row `k` of `src`.
    pub fn replace_rows(&mut self, base: Var, rows: Vec<usize>, src: Var) -> Var {
        let mut out = self.value(base).clone();
        let s = self.value(src);
        assert_eq!(s.rows(), rows.len());
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(k));
        }
        self.owned(out, Op::ReplaceRows { base, rows, src }, &[base, src])
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let d = t.cols();
        let mut xhat = Tensor::zeros(t.rows(), d);
        let mut out = Tensor::zeros(t.rows(), d);
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat.set(r, c, xh);
                out.set(r, c, g.data()[c] * xh + b.data()[c]);
            }
        }
        self.owned(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&v| gelu(v)).collect());
        self.owned(out, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax over entries whose logit is finite; `-inf` entries
    /// come out as exactly zero. Every row needs at least one finite entry.
    pub fn masked_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite(), "softmax row {r} has no permitted entries");
            let o = out.row_mut(r);
            let mut sum = 0.0;
            for (oc, &v) in o.iter_mut().zip(row) {
                if v.is_finite() {
                    *oc = (v - max).exp();
                    sum += *oc;
                }
            }
            for oc in o.iter_mut() {
                *oc /= sum;
            }
        }
        self.owned(out, Op::MaskedSoftmax(x), &[x])
    }

    /// Divides each row by its L2 norm. Returns `None` if any row is zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Option<Var> {
        let t = self.value(x);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let n = dot(t.row(r), t.row(r)).sqrt();
            if n == 0.0 || !n.is_finite() {
                return None;
            }
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        Some(self.owned(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Mean softmax cross-entropy over rows with a target; 0 when none has one.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len());
        let mut probs = Tensor::zeros(t.rows(), t.cols());
        let mut total = 0.0;
        let mut count = 0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            let row = t.row(r);
            let lse = crate::tensor::log_sum_exp(row);
            total += lse - row[tgt];
            count += 1;
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.owned(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets, probs, count },
            &[logits],
        )
    }

    /// `Σ xᵢ²` as a 1×1 tensor.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.owned(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Element-wise `-ln σ(x)`.
    pub fn neg_log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(
            t.rows(),
            t.cols(),
            t.data().iter().map(|&v| neg_log_sigmoid(v)).collect(),
        );
        self.owned(out, Op::NegLogSigmoid(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.owned(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Element-wise sum of same-shaped tensors, folded left to right.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for p in &parts[1..] {
            out.add_assign(self.value(*p));
        }
        self.owned(out, Op::Sum(parts.to_vec()), parts)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.backward_seeded(vec![(loss, Tensor::scalar(1.0))])
    }

    /// Backpropagates given upstream gradients for several nodes at once,
    /// e.g. gradients of a loss computed on another graph.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(v).shape(), g.shape(), "seed gradient shape");
            last = last.max(v.0);
            self.acc(&mut grads, v, || g);
        }
        let mut per_store: Vec<Vec<Option<Tensor>>> =
            self.stores.iter().map(|(s, _)| vec![None; s.len()]).collect();
        if self.nodes.is_empty() {
            return Gradients { per_store };
        }

        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant | Op::Detach => {}
                Op::Param { store, id } => {
                    per_store[*store][id.index()] = Some(g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, || g.clone());
                    self.acc(&mut grads, *b, || {
                        let mut n = g.clone();
                        n.scale_assign(-1.0);
                        n
                    });
                }
                Op::AddRow(a, bias) => {
                    self.acc(&mut grads, *bias, || {
                        let mut s = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        s
                    });
                    self.acc(&mut grads, *a, || g.clone());
                }
                Op::Scale(a, k) => {
                    self.acc(&mut grads, *a, || {
                        let mut n = g.clone();
                        n.scale_assign(*k);
                        n
                    });
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.matmul_nt(vb));
                    self.acc(&mut grads, *b, || va.matmul_tn(&g));
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.acc(&mut grads, *a, || g.matmul(vb));
                    self.acc(&mut grads, *b, || g.matmul_tn(va));
                }
                Op::Gather { table, idx } => {
                    let t = self.value(*table);
                    self.acc(&mut grads, *table, || {
                        let mut out = Tensor::zeros(t.rows(), t.cols());
                        for (r, &ti) in idx.iter().enumerate() {
                            for (o, v) in out.row_mut(ti).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        out
                    });
                }
                Op::SliceCols { x, start } => {
                    let t = self.value(*x);
                    self.acc(&mut grads, *x, || {
                        let mut out = Tensor::zeros(t.rows(), t.cols());
                        for r in 0..t.rows() {
                            out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                        }
                        out
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        self.acc(&mut grads, *p, || {
                            let mut out = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                out.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                            }
                            out
                        });
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let (h, w) = self.value(*p).shape();
                        self.acc(&mut grads, *p, || {
                            Tensor::from_vec(h, w, g.data()[r0 * w..(r0 + h) * w].to_vec())
                        });
                        r0 += h;
                    }
                }
                Op::ReplaceRows { base, rows, src } => {
                    self.acc(&mut grads, *src, || {
                        let mut out = Tensor::zeros(rows.len(), g.cols());
                        for (k, &r) in rows.iter().enumerate() {
                            out.row_mut(k).copy_from_slice(g.row(r));
                        }
                        out
                    });
                    self.acc(&mut grads, *base, || {
                        let mut out = g.clone();
                        for &r in rows {
                            out.row_mut(r).fill(0.0);
                        }
                        out
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let d = g.cols();
                    self.acc(&mut grads, *gain, || {
                        let mut s = Tensor::zeros(1, d);
                        for r in 0..g.rows() {
                            for c in 0..d {
                                s.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            }
                        }
                        s
                    });
                    self.acc(&mut grads, *bias, || {
                        let mut s = Tensor::zeros(1, d);
                        for r in 0..g.rows() {
                            for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        s
                    });
                    self.acc(&mut grads, *x, || {
                        let mut out = Tensor::zeros(g.rows(), d);
                        for r in 0..g.rows() {
                            let dxhat: Vec<f64> =
                                (0..d).map(|c| g.get(r, c) * gv.data()[c]).collect();
                            let xh = xhat.row(r);
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx = dot(&dxhat, xh) / d as f64;
                            for c in 0..d {
                                out.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx));
                            }
                        }
                        out
                    });
                }
                Op::Gelu(x) => {
                    let t = self.value(*x);
                    self.acc(&mut grads, *x, || {
                        let data =
                            t.data().iter().zip(g.data()).map(|(&v, &gg)| gg * gelu_grad(v)).collect();
                        Tensor::from_vec(t.rows(), t.cols(), data)
                    });
                }
                Op::MaskedSoftmax(x) => {
                    let p = &node.value;
                    self.acc(&mut grads, *x, || {
                        let mut out = Tensor::zeros(p.rows(), p.cols());
                        for r in 0..p.rows() {
                            let pr = p.row(r);
                            let s = dot(pr, g.row(r));
                            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                                *o = pr[c] * (g.get(r, c) - s);
                            }
                        }
                        out
                    });
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    self.acc(&mut grads, *x, || {
                        let mut out = Tensor::zeros(y.rows(), y.cols());
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let s = dot(yr, g.row(r));
                            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                                *o = (g.get(r, c) - yr[c] * s) / norms[r];
                            }
                        }
                        out
                    });
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    if *count == 0 {
                        continue;
                    }
                    let scale = g.item() / *count as f64;
                    self.acc(&mut grads, *logits, || {
                        let mut out = Tensor::zeros(probs.rows(), probs.cols());
                        for (r, tgt) in targets.iter().enumerate() {
                            let Some(tgt) = *tgt else { continue };
                            for (o, p) in out.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = p * scale;
                            }
                            out.row_mut(r)[tgt] -= scale;
                        }
                        out
                    });
                }
                Op::SumSquares(x) => {
                    let t = self.value(*x);
                    let k = 2.0 * g.item();
                    self.acc(&mut grads, *x, || {
                        Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|v| k * v).collect())
                    });
                }
                Op::NegLogSigmoid(x) => {
                    let t = self.value(*x);
                    self.acc(&mut grads, *x, || {
                        let data = t
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gg)| -gg * sigmoid(-v))
                            .collect();
                        Tensor::from_vec(t.rows(), t.cols(), data)
                    });
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let k = g.item() / t.len() as f64;
                    self.acc(&mut grads, *x, || Tensor::filled(t.rows(), t.cols(), k));
                }
                Op::Sum(parts) => {
                    for p in parts {
                        self.acc(&mut grads, *p, || g.clone());
                    }
                }
            }
        }
        Gradients { per_store }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` over every entry of parameter 0.
    fn check_grad(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(&[(store, true)]);
        let loss = f(&mut g);
        let grads = g.backward(loss);
        for id in store.ids() {
            let analytic = grads.get(0, id).cloned().unwrap_or_else(|| {
                let t = store.get(id);
                Tensor::zeros(t.rows(), t.cols())
            });
            for k in 0..store.get(id).len() {
                let h = 1e-6;
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let lp = {
                    let mut g = Graph::new(&[(&plus, true)]);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                let lm = {
                    let mut g = Graph::new(&[(&minus, true)]);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-5 || (a - numeric).abs() < 1e-9,
                    "{}[{k}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("x", Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.1, 0.2, -0.4]]));
        s.register("w", Tensor::from_rows(&[vec![0.5, -0.3], vec![0.1, 0.9], vec![-0.7, 0.2]]));
        s.register("g", Tensor::row_vector(vec![1.2, 0.8, 1.0]));
        s.register("b", Tensor::row_vector(vec![0.1, -0.2, 0.05]));
        s
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let s = store();
        check_grad(&s, |g| {
            let x = g.param(0, ParamId(0));
            let w = g.param(0, ParamId(1));
            let gain = g.param(0, ParamId(2));
            let bias = g.param(0, ParamId(3));
            let ln = g.layer_norm(x, gain, bias, 1e-5);
            let act = g.gelu(ln);
            let proj = g.matmul(act, w);
            let scores = g.matmul_nt(proj, proj);
            let probs = g.masked_softmax(scores);
            let mixed = g.matmul(probs, proj);
            let n = g.l2_normalize_rows(mixed).unwrap();
            let logits = g.matmul_nt(n, proj);
            let ce = g.cross_entropy(logits, vec![Some(1), Some(0)]);
            let sq = g.sum_squares(mixed);
            let nls = g.neg_log_sigmoid(logits);
            let m = g.mean(nls);
            g.sum(&[ce, sq, m])
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let s = store();
        check_grad(&s, |g| {
            let x = g.param(0, ParamId(0));
            let b = g.param(0, ParamId(3));
            let left = g.slice_cols(x, 1, 2);
            let rows = g.gather(x, vec![1, 1, 0]);
            let cat = g.concat_cols(&[rows, rows]);
            let stacked = g.concat_rows(&[x, b]);
            let replaced = g.replace_rows(stacked, vec![2], b);
            let shifted = g.add_row(replaced, b);
            let diff = g.sub(shifted, shifted);
            let scaled = g.scale(left, 3.0);
            let a = g.sum_squares(cat);
            let c = g.sum_squares(shifted);
            let d = g.sum_squares(scaled);
            let e = g.sum_squares(diff);
            g.sum(&[a, c, d, e])
        });
    }

    #[test]
    fn seeded_backward_composes_across_graphs() {
        let s = store();
        let mut g = Graph::new(&[(&s, true)]);
        let x = g.param(0, ParamId(0));
        let w = g.param(0, ParamId(1));
        let y = g.matmul(x, w);
        let whole = g.sum_squares(y);
        let direct = g.backward(whole);

        // same loss split in two graphs: y is a leaf of the second
        let mut outer_store = ParamStore::new();
        let yid = outer_store.register("y", g.value(y).clone());
        let mut h = Graph::new(&[(&outer_store, true)]);
        let yv = h.param(0, yid);
        let l = h.sum_squares(yv);
        let upstream = h.backward(l).get(0, yid).unwrap().clone();
        let split = g.backward_seeded(vec![(y, upstream)]);
        for id in [ParamId(0), ParamId(1)] {
            assert_eq!(direct.get(0, id), split.get(0, id));
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let s = store();
        let mut g = Graph::new(&[(&s, true)]);
        let x = g.param(0, ParamId(0));
        let w = g.param(0, ParamId(1));
        let det = g.detach(x);
        assert_eq!(g.value(det), s.get(ParamId(0)));
        let y = g.matmul(det, w);
        let l = g.sum_squares(y);
        let grads = g.backward(l);
        assert!(grads.get(0, ParamId(0)).is_none());
        assert!(grads.get(0, ParamId(1)).is_some());
    }

    #[test]
    fn masked_entries_are_exact_zeros() {
        let s = ParamStore::new();
        let mut g = Graph::new(&[(&s, true)]);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, f64::NEG_INFINITY, 2.0]]));
        let p = g.masked_softmax(x);
        let v = g.value(p);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_store_yields_no_gradient() {
        let s = store();
        let mut g = Graph::new(&[(&s, false)]);
        let x = g.param(0, ParamId(0));
        let l = g.sum_squares(x);
        let grads = g.backward(l);
        assert!(grads.get(0, ParamId(0)).is_none());
    }

    #[test]
    fn cross_entropy_without_targets_is_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&[(&s, true)]);
        let x = g.constant(Tensor::zeros(2, 3));
        let l = g.cross_entropy(x, vec![None, None]);
        assert_eq!(g.value(l).item(), 0.0);
    }
}
