//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly, so node values are available
//! immediately; [`Graph::backward`] then walks the tape in reverse. Leaves are
//! either constants or named parameters; only trainable parameters receive
//! gradients, and [`Graph::stop_grad`] cuts a subtree out of differentiation.

use std::collections::BTreeMap;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

pub type Gradients = BTreeMap<String, Tensor>;

enum Op {
    Leaf,
    StopGrad,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Tensor, rstd: Vec<f64> },
    CausalSoftmax(Var),
    LogSoftmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    SubRowMax { x: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    ShiftUp(Var),
    Softabs(Var),
    ClampMin(Var, f64),
    Square(Var),
    Abs(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Replayed outputs for successive `stop_grad` calls.
    frozen: Option<std::vec::IntoIter<Tensor>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// A graph whose `stop_grad` calls return `values` in order instead of
    /// their inputs, so that a function can be re-evaluated with its
    /// stop-gradient terms held at the values of an earlier evaluation.
    pub fn with_frozen(values: Vec<Tensor>) -> Graph {
        Graph {
            nodes: Vec::new(),
            frozen: Some(values.into_iter()),
        }
    }

    /// Output value of every `stop_grad` node, in recording order.
    pub fn stop_grad_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, name: &str, t: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: trainable,
            param: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = match self.frozen.as_mut().and_then(Iterator::next) {
            Some(v) if v.shape() == self.value(x).shape() => v,
            _ => self.value(x).clone(),
        };
        self.nodes.push(Node {
            value,
            op: Op::StopGrad,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `x[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert!(rv.rows == 1 && rv.cols == xv.cols, "add_row shape");
        let mut v = xv.clone();
        for r in 0..v.rows {
            for (o, b) in v.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    /// `x[m×n] + col[m×1]` broadcast over columns.
    pub fn add_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert!(cv.cols == 1 && cv.rows == xv.rows, "add_col shape");
        let mut v = xv.clone();
        for r in 0..v.rows {
            let c = cv.data[r];
            for o in v.row_mut(r) {
                *o += c;
            }
        }
        self.push(v, Op::AddCol(x, col), &[x, col])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|p| p * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|p| p + c);
        self.push(v, Op::AddConst(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (&self.value(g).data, &self.value(b).data);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut xhat = Tensor::zeros(xv.rows, xv.cols);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let (mean, rs) = tensor::layer_norm_row(xv.row(r), gv, bv, eps, out.row_mut(r));
            for (h, &p) in xhat.row_mut(r).iter_mut().zip(xv.row(r)) {
                *h = (p - mean) * rs;
            }
            rstd.push(rs);
        }
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd }, &[x, g, b])
    }

    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, xv.cols, "causal softmax needs a square score matrix");
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            tensor::causal_softmax_row(xv.row(r), r, out.row_mut(r));
        }
        self.push(out, Op::CausalSoftmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            tensor::log_softmax_row(xv.row(r), out.row_mut(r));
        }
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    /// Rows `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Subtracts each row's maximum (lowest-index argmax) from the row.
    pub fn sub_row_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut idx = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let j = tensor::argmax(xv.row(r));
            let m = xv.get(r, j);
            for o in out.row_mut(r) {
                *o -= m;
            }
            idx.push(j);
        }
        self.push(out, Op::SubRowMax { x, idx }, &[x])
    }

    /// Column of `x[r][idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(idx.len(), xv.rows, "pick needs one index per row");
        let vals = idx.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        self.push(Tensor::column(vals), Op::Pick { x, idx: idx.to_vec() }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows, "slice_rows out of range");
        let data = xv.data[start * xv.cols..(start + len) * xv.cols].to_vec();
        let v = Tensor::from_vec(len, xv.cols, data);
        self.push(v, Op::SliceRows { x, start }, &[x])
    }

    /// `y[r] = x[r + 1]`, with a zero last row.
    pub fn shift_up(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = Tensor::zeros(xv.rows, xv.cols);
        if xv.rows > 1 {
            v.data[..(xv.rows - 1) * xv.cols].copy_from_slice(&xv.data[xv.cols..]);
        }
        self.push(v, Op::ShiftUp(x), &[x])
    }

    pub fn softabs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(tensor::softabs);
        self.push(v, Op::Softabs(x), &[x])
    }

    /// `max(x, floor)`; entries below the floor pass no gradient.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|p| p.max(floor));
        self.push(v, Op::ClampMin(x, floor), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p * p);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = 0.0;
        for v in &self.value(x).data {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Fingerprint of every discrete choice made while recording: row
    /// maximizers, signs inside `abs` and active floors. Two evaluations with
    /// equal fingerprints lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::SubRowMax { idx, .. } => idx.hash(&mut h),
                Op::Abs(x) => {
                    for &v in &self.value(*x).data {
                        (v > 0.0, v < 0.0).hash(&mut h);
                    }
                }
                Op::ClampMin(x, floor) => {
                    for &v in &self.value(*x).data {
                        (v < *floor).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter that it depends on, accumulated by parameter name.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "loss must be a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut out = Gradients::new();
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(name) = &node.param {
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    self.accumulate(grads, *a, tensor::matmul_bt(g, val(*b)));
                }
                if need(*b) {
                    self.accumulate(grads, *b, tensor::matmul_at(val(*a), g));
                }
            }
            Op::MatMulBt(a, b) => {
                if need(*a) {
                    self.accumulate(grads, *a, tensor::matmul(g, val(*b)));
                }
                if need(*b) {
                    self.accumulate(grads, *b, tensor::matmul_at(g, val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|p| -p));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    let mut d = g.clone();
                    for (p, q) in d.data.iter_mut().zip(&val(*b).data) {
                        *p *= q;
                    }
                    self.accumulate(grads, *a, d);
                }
                if need(*b) {
                    let mut d = g.clone();
                    for (p, q) in d.data.iter_mut().zip(&val(*a).data) {
                        *p *= q;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if need(*row) {
                    let mut d = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, p) in d.data.iter_mut().zip(g.row(r)) {
                            *o += p;
                        }
                    }
                    self.accumulate(grads, *row, d);
                }
            }
            Op::AddCol(x, col) => {
                self.accumulate(grads, *x, g.clone());
                if need(*col) {
                    let sums = (0..g.rows).map(|r| g.row(r).iter().sum()).collect();
                    self.accumulate(grads, *col, Tensor::column(sums));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|p| p * c)),
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Gelu(x) => {
                let mut d = g.clone();
                for (p, &xv) in d.data.iter_mut().zip(&val(*x).data) {
                    *p *= tensor::gelu_grad(xv);
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, g: gain, b, xhat, rstd } => {
                let gv = &val(*gain).data;
                let n = g.cols as f64;
                if need(*x) {
                    let mut dx = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..g.cols {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        let out = dx.row_mut(r);
                        for j in 0..g.cols {
                            out[j] = rstd[r] * (gr[j] * gv[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if need(*gain) || need(*b) {
                    let mut dg = Tensor::zeros(1, g.cols);
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for j in 0..g.cols {
                            dg.data[j] += g.get(r, j) * xhat.get(r, j);
                            db.data[j] += g.get(r, j);
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::CausalSoftmax(x) => {
                let p = &node.value;
                let mut dx = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let s = tensor::dot(p.row(r), g.row(r));
                    for j in 0..=r {
                        dx.data[r * g.cols + j] = p.get(r, j) * (g.get(r, j) - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..g.rows {
                    let s: f64 = g.row(r).iter().sum();
                    for (o, &yv) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= yv.exp() * s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                if need(*table) {
                    let tv = val(*table);
                    let mut d = Tensor::zeros(tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, p) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += p;
                        }
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::SubRowMax { x, idx } => {
                let mut dx = g.clone();
                for (r, &j) in idx.iter().enumerate() {
                    let s: f64 = g.row(r).iter().sum();
                    dx.data[r * g.cols + j] -= s;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Pick { x, idx } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (r, &c) in idx.iter().enumerate() {
                    dx.data[r * xv.cols + c] = g.data[r];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                dx.data[start * xv.cols..start * xv.cols + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *x, dx);
            }
            Op::ShiftUp(x) => {
                let mut dx = Tensor::zeros(g.rows, g.cols);
                if g.rows > 1 {
                    dx.data[g.cols..].copy_from_slice(&g.data[..(g.rows - 1) * g.cols]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softabs(x) => {
                let mut d = g.clone();
                for (p, &xv) in d.data.iter_mut().zip(&val(*x).data) {
                    *p *= tensor::softabs_grad(xv);
                }
                self.accumulate(grads, *x, d);
            }
            Op::ClampMin(x, floor) => {
                let mut d = g.clone();
                for (p, &xv) in d.data.iter_mut().zip(&val(*x).data) {
                    if xv < *floor {
                        *p = 0.0;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let mut d = g.clone();
                for (p, &xv) in d.data.iter_mut().zip(&val(*x).data) {
                    *p *= 2.0 * xv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let mut d = g.clone();
                for (p, &xv) in d.data.iter_mut().zip(&val(*x).data) {
                    *p *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::from_vec(xv.rows, xv.cols, vec![gv; xv.len()]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_fd(build: impl Fn(&mut Graph, Var) -> Var, x0: Tensor) {
        let mut g = Graph::new();
        let x = g.param("x", x0.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = &grads["x"];
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data[i] += delta;
                let mut g = Graph::new();
                let x = g.param("x", t, true);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {i}: fd {fd} vs {a}");
        }
    }

    fn sample() -> Tensor {
        Tensor::from_vec(3, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4, -0.7, 0.9, 0.2])
    }

    #[test]
    fn attention_style_chain() {
        scalar_fd(
            |g, x| {
                let s = g.matmul_bt(x, x);
                let s = g.scale(s, 0.5);
                let p = g.causal_softmax(s);
                let o = g.matmul(p, x);
                let o = g.gelu(o);
                let sq = g.square(o);
                g.sum(sq)
            },
            sample(),
        );
    }

    #[test]
    fn norm_and_log_softmax() {
        scalar_fd(
            |g, x| {
                let gain = g.constant(Tensor::from_vec(1, 3, vec![1.2, 0.7, -0.5]));
                let bias = g.constant(Tensor::from_vec(1, 3, vec![0.1, 0.0, 0.3]));
                let h = g.layer_norm(x, gain, bias, 1e-5);
                let ls = g.log_softmax(h);
                let p = g.pick(ls, &[0, 2, 1]);
                g.sum(p)
            },
            sample(),
        );
    }

    #[test]
    fn dueling_pieces() {
        scalar_fd(
            |g, x| {
                let a = g.sub_row_max(x);
                let col = g.slice_rows(x, 0, 3);
                let v = g.pick(col, &[1, 1, 1]);
                let v = g.softabs(v);
                let v = g.scale(v, -1.0);
                let q = g.add_col(a, v);
                let nxt = g.shift_up(q);
                let d = g.sub(q, nxt);
                let d = g.abs(d);
                let m = g.mul(d, x);
                g.mean(m)
            },
            sample(),
        );
    }

    #[test]
    fn stop_gradient_zeroes_everything() {
        let mut g = Graph::new();
        let x = g.param("x", sample(), true);
        let sq = g.square(x);
        let s = g.sum(sq);
        let cut = g.stop_grad(s);
        let grads = g.backward(cut).unwrap();
        assert!(grads.values().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", sample(), true);
        let w = g.param("w", sample(), false);
        let y = g.matmul(x, w);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.contains_key("x"));
        assert!(!grads.contains_key("w"));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", sample(), true);
        assert!(g.backward(x).is_err());
    }
}
