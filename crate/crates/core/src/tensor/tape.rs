// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wengert-list tape: every operation appends a node holding its value and
//! enough saved state to replay the chain rule in reverse.
//!
//! Nodes are appended in evaluation order, so walking the list from the loss
//! back to index 0 visits operations in reverse topological order. Leaves
//! created with [`Tape::constant`] never receive gradients, and nothing
//! downstream of constants alone is differentiated, which keeps frozen
//! backbones cheap.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, MatView, MatViewMut, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Mul(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Input index plus the saved `tanh` term of each element.
    Gelu(usize, Vec<T>),
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        src: usize,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
    },
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    is_param: bool,
    retain: bool,
}

/// Gradients produced by [`Tape::backward`].
///
/// Holds one entry per parameter leaf (all-zero when the loss does not
/// depend on it) plus any node marked with [`Tape::retain_grad`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.index)
    }

    /// Like [`Gradients::get`] but panics when the variable has no gradient.
    pub fn wrt(&self, var: Var) -> &Tensor<T> {
        self.get(var).expect("no gradient recorded for variable")
    }
}

/// Reverse-mode gradient tape.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: fresh_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Trainable leaf; [`Tape::backward`] always reports its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: is_param,
            is_param,
            retain: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Keep the gradient of an intermediate node in the backward result.
    pub fn retain_grad(&mut self, var: Var) -> Result<()> {
        let i = self.check(var)?;
        self.nodes[i].retain = true;
        Ok(())
    }

    /// Value of a node.
    ///
    /// # Panics
    ///
    /// If `var` was created by another tape or before the last backward pass.
    pub fn value(&self, var: Var) -> &Tensor<T> {
        let i = self.check(var).expect("value of a foreign variable");
        &self.nodes[i].value
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::NotOnTape(var.index));
        }
        Ok(var.index)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
            retain: false,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn matrix(&self, var: Var, what: &str) -> Result<(usize, &Tensor<T>)> {
        let i = self.check(var)?;
        let t = &self.nodes[i].value;
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "{what} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((i, t))
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ta) = self.matrix(a, "matmul")?;
        let (ib, tb) = self.matrix(b, "matmul")?;
        if ta.cols() != tb.rows() {
            return Err(Error::Shape(format!("matmul of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.matmul(tb)?;
        self.push("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, "add")?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push("add", out, Op::Add(ia, ib), &[ia, ib])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape(a, b, "mul")?;
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push("mul", out, Op::Mul(ia, ib), &[ia, ib])
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ta) = self.matrix(a, "add_row")?;
        let ib = self.check(bias)?;
        let tb = &self.nodes[ib].value;
        if tb.shape() != [ta.cols()] {
            return Err(Error::Shape(format!(
                "add_row of {:?} and bias {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let bd = tb.data();
        let mut data = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks(ta.cols()) {
            data.extend(row.iter().zip(bd).map(|(&x, &b)| x + b));
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push("add_row", out, Op::AddRow(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let c = T::from_f64(c);
        let ta = &self.nodes[ia].value;
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect())?;
        self.push("scale", out, Op::Scale(ia, c), &[ia])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, tx) = self.matrix(x, "layer_norm")?;
        let ig = self.check(gain)?;
        let ib = self.check(bias)?;
        let (m, n) = (tx.rows(), tx.cols());
        let (tg, tb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::Shape(format!(
                "layer_norm of {:?} with gain {:?} and bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                inv_std,
            },
            &[ix, ig, ib],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        let inner: Vec<T> = ta.data().iter().map(|&x| gelu_tanh(x)).collect();
        let half = T::from_f64(0.5);
        let out = ta
            .data()
            .iter()
            .zip(&inner)
            .map(|(&x, &t)| half * x * (T::one() + t))
            .collect();
        let out = Tensor::new(ta.shape(), out)?;
        self.push("gelu", out, Op::Gelu(ia, inner), &[ia])
    }

    /// Selects rows of `table` (embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (it, tt) = self.matrix(table, "gather_rows")?;
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::OutOfRange {
                    what: "row index",
                    index: i,
                    limit: v,
                });
            }
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(&[idx.len(), d], out)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                table: it,
                idx: idx.to_vec(),
            },
            &[it],
        )
    }

    /// Adds row `i` of `src` into row `idx[i]` of an `n_rows`-row zero matrix.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (is, ts) = self.matrix(src, "scatter_rows")?;
        if ts.rows() != idx.len() {
            return Err(Error::Shape(format!(
                "scatter_rows of {:?} with {} indices",
                ts.shape(),
                idx.len()
            )));
        }
        let d = ts.cols();
        let mut out = vec![T::zero(); n_rows * d];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(Error::OutOfRange {
                    what: "row index",
                    index: i,
                    limit: n_rows,
                });
            }
            for (o, &s) in out[i * d..(i + 1) * d].iter_mut().zip(ts.row(r)) {
                *o = *o + s;
            }
        }
        let out = Tensor::new(&[n_rows, d], out)?;
        self.push(
            "scatter_rows",
            out,
            Op::ScatterRows {
                src: is,
                idx: idx.to_vec(),
            },
            &[is],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut ids = Vec::with_capacity(parts.len());
        let mut cols = None;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (i, t) = self.matrix(p, "concat_rows")?;
            if *cols.get_or_insert(t.cols()) != t.cols() {
                return Err(Error::Shape(format!(
                    "concat_rows with {} and {} columns",
                    cols.unwrap_or(0),
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
            ids.push(i);
        }
        let Some(cols) = cols else {
            return Err(Error::Shape("concat_rows of nothing".into()));
        };
        let out = Tensor::new(&[rows, cols], data)?;
        let parents = ids.clone();
        self.push("concat_rows", out, Op::ConcatRows(ids), &parents)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (is, ts) = self.matrix(src, "slice_rows")?;
        if len == 0 || start + len > ts.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                ts.shape()
            )));
        }
        let c = ts.cols();
        let out = Tensor::new(&[len, c], ts.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { src: is, start }, &[is])
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let ta = &self.nodes[ia].value;
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(ta.shape(), out)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(ia), &[ia])
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (il, tl) = self.matrix(logits, "cross_entropy")?;
        let (m, v) = (tl.rows(), tl.cols());
        if targets.len() != m || mask.len() != m {
            return Err(Error::Shape(format!(
                "cross_entropy of {:?} with {} targets and {} mask entries",
                tl.shape(),
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::OutOfRange {
                what: "target",
                index: bad,
                limit: v,
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::NoSupervisedPositions);
        }
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        for r in 0..m {
            if !mask[r] {
                continue;
            }
            let row = tl.row(r);
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            let lse = log_sum_exp(row);
            softmax_in_place(p);
            total = total + (lse - row[targets[r]]);
        }
        let loss = total / T::from_f64(count as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[il],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `N × d` with the rows of several sequences stacked;
    /// `segments` lists `(start_row, len)` for each sequence. Attention never
    /// crosses a segment boundary and row `t` only attends to rows `≤ t`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (iq, tq) = self.matrix(q, "causal_attention")?;
        let (ik, tk) = self.matrix(k, "causal_attention")?;
        let (iv, tv) = self.matrix(v, "causal_attention")?;
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(Error::Shape(format!(
                "causal_attention of {:?}, {:?}, {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        let (n, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} columns do not split into {heads} heads")));
        }
        check_segments(segments, n)?;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| heads * s.1 * s.1).sum());
        for &(start, len) in segments {
            for h in 0..heads {
                let view = |data| head_view(data, start, len, h, dh, d);
                let mut p = vec![T::zero(); len * len];
                gemm(
                    scale,
                    view(tq.data()),
                    view(tk.data()).t(),
                    T::zero(),
                    MatViewMut::dense(&mut p, len),
                );
                for (i, row) in p.chunks_mut(len).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                gemm(
                    T::one(),
                    MatView::dense(&p, len, len),
                    view(tv.data()),
                    T::zero(),
                    MatViewMut {
                        data: &mut out,
                        offset: start * d + h * dh,
                        rs: d,
                        cs: 1,
                    },
                );
                probs.extend_from_slice(&p);
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        self.push(
            "causal_attention",
            out,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[iq, ik, iv],
        )
    }

    // ── Reverse pass ─────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss` and clears the tape.
    ///
    /// Every [`Var`] issued before the call is invalidated afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let old_id = self.id;
        self.id = fresh_id();

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        let mut kept = HashMap::new();
        for i in (0..=li).rev() {
            let node = &nodes[i];
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, &mut grads, &node.op, &node.value, &g);
            if node.is_param || node.retain {
                kept.insert(i, Tensor::new(node.value.shape(), g)?);
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.is_param {
                kept.entry(i).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: old_id,
            grads: kept,
        })
    }
}

fn acc<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], p: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[p].requires_grad {
        return None;
    }
    Some(grads[p].get_or_insert_with(|| vec![T::zero(); nodes[p].value.numel()]))
}

/// Adds `src` to the gradient of node `p`, copying it when it is the first
/// contribution.
fn add_grad<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], p: usize, src: &[T]) {
    if !nodes[p].requires_grad {
        return;
    }
    match &mut grads[p] {
        Some(gp) => add_into(gp, src),
        slot => *slot = Some(src.to_vec()),
    }
}

fn add_grad_owned<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], p: usize, src: Vec<T>) {
    if !nodes[p].requires_grad {
        return;
    }
    match &mut grads[p] {
        Some(gp) => add_into(gp, &src),
        slot => *slot = Some(src),
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], op: &Op<T>, value: &Tensor<T>, g: &[T]) {
    match op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if let Some(ga) = acc(grads, nodes, a) {
                gemm(
                    T::one(),
                    MatView::dense(g, m, n),
                    MatView::dense(tb.data(), k, n).t(),
                    T::one(),
                    MatViewMut::dense(ga, k),
                );
            }
            if let Some(gb) = acc(grads, nodes, b) {
                gemm(
                    T::one(),
                    MatView::dense(ta.data(), m, k).t(),
                    MatView::dense(g, m, n),
                    T::one(),
                    MatViewMut::dense(gb, n),
                );
            }
        }
        &Op::Add(a, b) => {
            add_grad(grads, nodes, a, g);
            add_grad(grads, nodes, b, g);
        }
        &Op::Mul(a, b) => {
            let (ta, tb) = (nodes[a].value.data(), nodes[b].value.data());
            if let Some(ga) = acc(grads, nodes, a) {
                for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(tb) {
                    *o = *o + gi * bi;
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(ta) {
                    *o = *o + gi * ai;
                }
            }
        }
        &Op::AddRow(a, bias) => {
            add_grad(grads, nodes, a, g);
            let n = value.cols();
            if let Some(gb) = acc(grads, nodes, bias) {
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = acc(grads, nodes, a) {
                for (o, &gi) in ga.iter_mut().zip(g) {
                    *o = *o + gi * c;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = value.cols();
            let gain_v = nodes[*gain].value.data();
            if let Some(gg) = acc(grads, nodes, *gain) {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for c in 0..n {
                        gg[c] = gg[c] + grow[c] * hrow[c];
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, *bias) {
                for grow in g.chunks(n) {
                    add_into(gb, grow);
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                let nf = T::from_f64(n as f64);
                let mut dh = vec![T::zero(); n];
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    for c in 0..n {
                        dh[c] = grow[c] * gain_v[c];
                    }
                    let s1 = dh.iter().copied().sum::<T>();
                    let s2 = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>();
                    let k = inv_std[r] / nf;
                    for c in 0..n {
                        let o = &mut gx[r * n + c];
                        *o = *o + k * (nf * dh[c] - s1 - hrow[c] * s2);
                    }
                }
            }
        }
        Op::Gelu(a, inner) => {
            let ta = nodes[*a].value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (((o, &gi), &x), &t) in ga.iter_mut().zip(g).zip(ta).zip(inner) {
                    *o = *o + gi * gelu_grad(x, t);
                }
            }
        }
        Op::GatherRows { table, idx } => {
            let d = value.cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ScatterRows { src, idx } => {
            let d = value.cols();
            if let Some(gs) = acc(grads, nodes, *src) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gs[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                add_grad(grads, nodes, p, &g[offset..offset + len]);
                offset += len;
            }
        }
        &Op::SliceRows { src, start } => {
            let c = value.cols();
            if let Some(gs) = acc(grads, nodes, src) {
                add_into(&mut gs[start * c..start * c + g.len()], g);
            }
        }
        &Op::SoftmaxRows(a) => {
            let c = value.cols();
            if let Some(ga) = acc(grads, nodes, a) {
                for ((orow, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(value.data().chunks(c)) {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        orow[j] = orow[j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let v = nodes[*logits].value.cols();
            let k = g[0] / T::from_f64(*count as f64);
            if let Some(gl) = acc(grads, nodes, *logits) {
                for r in 0..mask.len() {
                    if !mask[r] {
                        continue;
                    }
                    let row = &mut gl[r * v..(r + 1) * v];
                    for j in 0..v {
                        row[j] = row[j] + k * probs[r * v + j];
                    }
                    row[targets[r]] = row[targets[r]] - k;
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, a) {
                ga.iter_mut().for_each(|o| *o = *o + g[0]);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } => attention_backward(nodes, grads, (*q, *k, *v), segments, *heads, probs, g),
    }
}

fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    (q, k, v): (usize, usize, usize),
    segments: &[(usize, usize)],
    heads: usize,
    probs: &[T],
    g: &[T],
) {
    let (tq, tk, tv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let (n, d) = (tq.rows(), tq.cols());
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut p_off = 0;
    for &(start, len) in segments {
        for h in 0..heads {
            let view = |data| head_view(data, start, len, h, dh, d);
            let out_view = |data| MatViewMut {
                data,
                offset: start * d + h * dh,
                rs: d,
                cs: 1,
            };
            let p = &probs[p_off..p_off + len * len];
            p_off += len * len;
            // dV = Pᵀ dO
            gemm(
                T::one(),
                MatView::dense(p, len, len).t(),
                view(g),
                T::one(),
                out_view(&mut dv),
            );
            // dP = dO Vᵀ, then dS = P ∘ (dP − rowsum(dP ∘ P))
            let mut ds = vec![T::zero(); len * len];
            gemm(
                T::one(),
                view(g),
                view(tv.data()).t(),
                T::zero(),
                MatViewMut::dense(&mut ds, len),
            );
            for (drow, prow) in ds.chunks_mut(len).zip(p.chunks(len)) {
                let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                for (x, &pi) in drow.iter_mut().zip(prow) {
                    *x = pi * (*x - dot);
                }
            }
            gemm(
                scale,
                MatView::dense(&ds, len, len),
                view(tk.data()),
                T::one(),
                out_view(&mut dq),
            );
            gemm(
                scale,
                MatView::dense(&ds, len, len).t(),
                view(tq.data()),
                T::one(),
                out_view(&mut dk),
            );
        }
    }
    for (p, delta) in [(q, dq), (k, dk), (v, dv)] {
        add_grad_owned(grads, nodes, p, delta);
    }
}

fn head_view<T>(data: &[T], start: usize, len: usize, h: usize, dh: usize, d: usize) -> MatView<'_, T> {
    MatView {
        data,
        offset: start * d + h * dh,
        rows: len,
        cols: dh,
        rs: d,
        cs: 1,
    }
}

fn check_segments(segments: &[(usize, usize)], n: usize) -> Result<()> {
    let mut next = 0;
    for &(start, len) in segments {
        if start != next || len == 0 {
            return Err(Error::Shape(format!("segments {segments:?} do not tile {n} rows")));
        }
        next = start + len;
    }
    if next != n {
        return Err(Error::Shape(format!("segments {segments:?} do not tile {n} rows")));
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// `tanh(√(2/π)·(x + 0.044715·x³))`, through `exp` (much cheaper than
/// `tanh` in libm).
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let (k, c) = (T::from_f64(GELU_K), T::from_f64(GELU_C));
    let two = T::from_f64(2.0);
    let u = k * (x + c * x * x * x);
    T::one() - two / ((two * u).exp() + T::one())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * x * (T::one() + gelu_tanh(x))
}

fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let (k, c, half) = (T::from_f64(GELU_K), T::from_f64(GELU_C), T::from_f64(0.5));
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}
